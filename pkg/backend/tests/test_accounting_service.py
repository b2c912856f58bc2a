import pytest

from models.schemas import ModelConfig
from services import accounting_service, model_service
from conftest import tiny_model_config


def vit_lite(manifolds="e", fusion="early") -> ModelConfig:
    return ModelConfig(image_size=32, patch_size=4, depth=6, mlp_ratio=2, num_classes=10,
                       attention={"heads": 4, "model_dim": 256, "manifolds": manifolds, "fusion": fusion})


@pytest.mark.parametrize("manifolds,fusion", [("e", "early"), ("e,s,g", "early"), ("s", "early"),
                                              ("e,g", "late"), ("e,s,g", "late")])
def test_param_count_matches_initialised_model(manifolds, fusion):
    cfg = tiny_model_config(manifolds, fusion)
    model = model_service.init_model_weights(cfg)
    assert accounting_service.count_params(cfg).total == model.params.scalar_count()


def test_vit_lite_baseline_size():
    params = accounting_service.count_params(vit_lite())
    assert params.total == 3_190_282
    assert params.fusion == 0


def test_early_fusion_param_overhead_is_closed_form():
    base = accounting_service.count_params(vit_lite()).total
    full = accounting_service.count_params(vit_lite("e,s,g")).total
    assert full - base == 6 * (3 * 4 ** 2 + 4) == 312
    assert (full - base) / base < 0.005


def test_early_fusion_flop_overhead_in_range():
    base = accounting_service.count_flops(vit_lite()).total
    full = accounting_service.count_flops(vit_lite("e,s,g")).total
    assert 0.05 <= full / base - 1 <= 0.25


def test_late_fusion_triples_attention_stack():
    single = accounting_service.count_params(vit_lite())
    late = accounting_service.count_params(vit_lite("e,s,g", "late"))
    assert late.blocks == 3 * single.blocks
    base_flops = accounting_service.count_flops(vit_lite()).total
    late_flops = accounting_service.count_flops(vit_lite("e,s,g", "late")).total
    assert abs(late_flops / (3 * base_flops) - 1) <= 0.15


def test_flops_are_twice_macs():
    flops = accounting_service.count_flops(vit_lite())
    assert flops.projections == 2 * 6 * 4 * 64 * 256 * 256
    assert flops.total == sum(v for k, v in flops.model_dump().items() if k != "total")


def test_ablation_table_layout():
    rows = accounting_service.ablation_table(vit_lite())
    assert [r.fusion for r in rows].count("early") == 7
    assert [r.fusion for r in rows].count("late") == 4
    assert rows[0].manifolds == ("euclidean",)
    assert rows[-1].manifolds == ("euclidean", "spd", "grassmann")
    singles = [r for r in rows if r.fusion == "early" and len(r.manifolds) == 1]
    assert singles[1].params - singles[0].params == 6 * (4 ** 2 + 4)
