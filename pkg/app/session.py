import logging
import os
from concurrent.futures import ThreadPoolExecutor
from contextlib import contextmanager
from pathlib import Path
from typing import Optional

from dotenv import load_dotenv

logger = logging.getLogger(__name__)


class RuntimeSettings():
    def __init__(self):
        load_dotenv()

    def workers(self) -> int:
        try:
            return max(1, int(os.environ['G_CALC_WORKERS']))
        except (KeyError, ValueError) as k:
            fallback = os.cpu_count() or 1
            logger.debug(f'No usable G_CALC_WORKERS found, using {fallback} workers ({k})')
            return fallback

    def log_level(self) -> str:
        return os.environ.get('G_CALC_LOG_LEVEL', 'INFO').upper()

    def output_root(self) -> Path:
        try:
            return Path(os.environ['G_CALC_OUTPUT_ROOT'])
        except KeyError as k:
            logger.debug(f'No output root configured, using ./runs as fallback ({k})')
            return Path('runs')

runtime_settings = RuntimeSettings()

@contextmanager
def get_pool(workers: Optional[int] = None):
    pool = ThreadPoolExecutor(max_workers=workers or runtime_settings.workers())
    try:
        yield pool
    finally:
        pool.shutdown()
