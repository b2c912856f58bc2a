from commands import evaluate, gen_data, gradcheck, inspect_maps, report, train, verify

COMMANDS = (train, evaluate, gen_data, gradcheck, verify, report, inspect_maps)
