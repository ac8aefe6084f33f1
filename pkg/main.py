import sys
import time
import traceback

from fpflow.runtime.paths import app_data_path
from training.pipeline import main as run_experiment


def _log_fatal_error(exc: Exception) -> None:
    payload = "".join(traceback.format_exception(type(exc), exc, exc.__traceback__))
    log_path = app_data_path("fpflow_errors.log")
    try:
        with log_path.open("a", encoding="utf-8") as f:
            f.write(f"\n[{int(time.time())}] stage=run\n{payload}\n")
    except OSError:
        pass


def main() -> int:
    try:
        return run_experiment(sys.argv[1:])
    except Exception as exc:
        _log_fatal_error(exc)
        print("Fatal error. Check fpflow_errors.log in app data directory.", file=sys.stderr)
        raise


if __name__ == "__main__":
    raise SystemExit(main())
