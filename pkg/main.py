import sys
import uuid
from pathlib import Path

# Add src directory to path
sys.path.insert(0, str(Path(__file__).parent))

from src.cli.commands import EXIT_USAGE, UsageError, parse_args, run_command
from src.core.experiment_runner import ExperimentRunner
from src.core.worker_pool import WorkerPool
from src.utils.logger import LoggerSetup, write_session_log


def main(argv=None) -> int:
    """Command-line entry point; returns the process exit code."""
    try:
        args = parse_args(argv)
    except UsageError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE

    log_dir = Path(args.log_dir) if args.log_dir else None
    LoggerSetup.setup(log_dir=log_dir, log_level=args.log_level or "INFO")

    try:
        runner = ExperimentRunner(WorkerPool(args.threads))
    except ValueError as e:
        # Bad ECP_THREADS value
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE

    code = run_command(args, runner)

    results = [result for run in runner.runs for result in run.results]
    session_dir = log_dir or Path(__file__).parent / "logs"
    write_session_log(session_dir, f"{args.command}_{uuid.uuid4().hex[:8]}", results)
    return code


if __name__ == "__main__":
    sys.exit(main())
