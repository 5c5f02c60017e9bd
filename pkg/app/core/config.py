import os
from pathlib import Path
from dotenv import load_dotenv

ROOT = Path(__file__).resolve().parents[2]
load_dotenv(ROOT/".env", override=False)

class Settings:
    # Feature caches (spectrograms, pose windows, window indices); unset means <output_dir>/cache
    CACHE_ROOT: str | None = os.getenv("GESTURE_CACHE_ROOT") or None

    # Runtime
    LOG_LEVEL: str = os.getenv("GESTURE_LOG_LEVEL", "INFO")
    DEVICE: str = os.getenv("GESTURE_DEVICE", "cpu")
    JOBS: int = int(os.getenv("GESTURE_JOBS", "1"))
    TORCH_THREADS: int = int(os.getenv("GESTURE_TORCH_THREADS", "0"))

    # Shipped tables
    DATA_DIR: str = str(Path(__file__).resolve().parents[1]/"data")
    DEFAULT_EXPERIMENT: str = str(Path(__file__).resolve().parents[1]/"data"/"default_experiment.yaml")
    JOINT_TABLE: str = os.getenv("GESTURE_JOINT_TABLE", str(Path(__file__).resolve().parents[1]/"data"/"joints_27.csv"))

settings = Settings()
