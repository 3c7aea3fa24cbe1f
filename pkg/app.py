import os
import sys
import logging
import argparse

from config import Config, load_campaign_config
from services.errors import ConfigError, StressLabError

COMMANDS = ('generate', 'train', 'stress', 'report')


def setup_logging():
    # Ensure the log directory exists before logging
    log_dir = Config.STRESSLAB_LOG_DIR
    try:
        os.makedirs(log_dir, exist_ok=True)
        logging.basicConfig(
            level=str(Config.LOG_LEVEL).upper(),
            format='%(asctime)s - %(name)s - %(levelname)s - %(message)s',
            handlers=[
                logging.FileHandler(os.path.join(log_dir, 'stresslab.log'), encoding='utf-8'),
                logging.StreamHandler()
            ],
            force=True,
        )
    except Exception as e:
        logging.basicConfig(level=logging.INFO, force=True)
        logging.getLogger(__name__).warning(f"Could not set up file logging: {e}")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog='stresslab', description='Stress-test neural operators on PDE families')
    parser.add_argument('command', choices=COMMANDS)
    parser.add_argument('--config', required=True, help='Campaign JSON config')
    parser.add_argument('--jobs', type=int, default=None, help='Worker processes (default: STRESSLAB_JOBS)')
    parser.add_argument('--deterministic', action='store_true', help='Run every task sequentially in order')
    parser.add_argument('--pde', default=None, help='Restrict to one PDE family tag')
    parser.add_argument('--scenario', default=None, help='Restrict stress runs to one scenario kind')
    return parser


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as e:
        return 2 if e.code else 0

    setup_logging()
    logger = logging.getLogger(__name__)

    # Import after logging is configured
    from services import campaign
    from services.sampler import PDEFamily, ScenarioKind

    try:
        Config.validate_config()
        cfg = load_campaign_config(args.config)
        if args.pde is not None:
            PDEFamily(args.pde)
        if args.scenario is not None:
            ScenarioKind(args.scenario)
        jobs = args.jobs if args.jobs is not None else Config.jobs()
        if jobs < 1:
            raise ConfigError(f"--jobs must be positive, got {jobs}")
    except (ConfigError, ValueError) as e:
        logger.error(f"Configuration error: {e}")
        return 2

    try:
        if args.command == 'generate':
            return campaign.cmd_generate(cfg, jobs=jobs, deterministic=args.deterministic, pde=args.pde)
        if args.command == 'train':
            return campaign.cmd_train(cfg, jobs=jobs, deterministic=args.deterministic, pde=args.pde)
        if args.command == 'stress':
            return campaign.cmd_stress(cfg, jobs=jobs, deterministic=args.deterministic,
                                       pde=args.pde, scenario=args.scenario)
        return campaign.cmd_report(cfg)
    except ConfigError as e:
        logger.error(f"Configuration error: {e}")
        return 2
    except OSError as e:
        logger.error(f"Cannot write campaign files: {e}")
        return 2
    except StressLabError as e:
        logger.error(f"{args.command} failed: {e}")
        return 3
    except ValueError as e:
        logger.error(f"{args.command} failed on invalid data: {e}")
        return 3


if __name__ == '__main__':
    sys.exit(main())
