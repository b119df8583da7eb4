import logging
import os
import dotenv

dotenv.load_dotenv()

OUTPUT_DIR = os.getenv("SPARSEREG_OUTPUT_DIR", "runs")

LOG_LEVEL = os.getenv("SPARSEREG_LOG_LEVEL", "INFO")

N_JOBS = int(os.getenv("SPARSEREG_N_JOBS", "1"))

# Pinned expert/random returns per environment, filled on first use or by `sparsereg baselines`
BASELINES_PATH = os.getenv("SPARSEREG_BASELINES_PATH", ".sparsereg/score_baselines.json")

SHOW_PROGRESS = os.getenv("SPARSEREG_PROGRESS", "1").lower() not in ("0", "false", "no")

LOG_FORMAT = "%(asctime)s %(levelname)s %(name)s: %(message)s"


def configure_logging(level: str | None = None) -> None:
    root = logging.getLogger("sparsereg")
    if root.handlers:
        root.setLevel(level or LOG_LEVEL)
        return
    handler = logging.StreamHandler()
    handler.setFormatter(logging.Formatter(LOG_FORMAT))
    root.addHandler(handler)
    root.setLevel(level or LOG_LEVEL)
