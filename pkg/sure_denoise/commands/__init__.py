from sure_denoise.commands import corrupt, denoise, refine, train, validate

COMMANDS = (corrupt, train, refine, denoise, validate)


def register_commands(subparsers, common):
    for module in COMMANDS:
        module.register(subparsers, common)
