import argparse
import logging
import sys

from sure_denoise import __version__
from sure_denoise.config import Config
from sure_denoise.exceptions import SureDenoiseError

logger = logging.getLogger(__name__)


def configure_logging(level=None):
    level = (level or Config.LOG_LEVEL).upper()
    # no-op when the root logger already has handlers
    logging.basicConfig(level=level, format=Config.LOG_FORMAT)
    logging.getLogger('sure_denoise').setLevel(level)


def create_app():
    parser = argparse.ArgumentParser(
        prog='sure-denoise',
        description='Train and refine image denoisers without ground truth using Stein\'s unbiased risk estimate.')
    parser.add_argument('--version', action='version', version=f'%(prog)s {__version__}')

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument('--config', help='JSON run configuration')
    common.add_argument('--seed', type=int, help='master seed (overrides "seed")')
    common.add_argument('--output-dir', help='output directory (overrides "output_dir")')
    common.add_argument('--threads', type=int, help='worker threads for oracle evaluation')
    common.add_argument('--log-level', choices=['DEBUG', 'INFO', 'WARNING', 'ERROR'])

    subparsers = parser.add_subparsers(dest='command', metavar='{corrupt,train,refine,denoise,validate}')
    subparsers.required = True

    from sure_denoise.commands import register_commands
    register_commands(subparsers, common)
    return parser


def main(argv=None):
    parser = create_app()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else 2
    configure_logging(args.log_level)
    try:
        return args.handler(args) or 0
    except SureDenoiseError as exc:
        logger.error('%s: %s', type(exc).__name__, exc)
        return exc.exit_code


if __name__ == '__main__':
    sys.exit(main())
