import json
import logging
import sys
from datetime import datetime
from pathlib import Path
from typing import Any, Dict, Optional, Union

import psutil

from database.database import Database

LOG_FORMAT = '%(asctime)s - %(name)s - %(levelname)s - %(message)s'

logger = logging.getLogger(__name__)


def setup_logging(level: Union[str, int] = 'INFO', log_file: Optional[Union[str, Path]] = None) -> None:
    """Configure the root logger with a console handler and an optional file handler."""
    if isinstance(level, str):
        resolved = logging.getLevelName(level.upper())
        if not isinstance(resolved, int):
            raise ValueError(f"Unknown log level: {level}")
        level = resolved

    handlers = [logging.StreamHandler(sys.stdout)]
    if log_file is not None:
        Path(log_file).parent.mkdir(parents=True, exist_ok=True)
        handlers.append(logging.FileHandler(log_file))

    logging.basicConfig(level=level, format=LOG_FORMAT, handlers=handlers, force=True)


class RunLogger:
    """
    Records toolkit runs in the sqlite ledger.

    The ledger carries wall-clock timestamps and machine load, so it lives next to
    the run directories rather than inside them.
    """

    def __init__(self, db_path: Union[str, Path] = 'ledger.db'):
        Path(db_path).parent.mkdir(parents=True, exist_ok=True)
        self.db = Database(str(db_path))

    def start_run(self, command: str, config_hash: str, seed: int) -> int:
        """Start a new run and return the run ID."""
        run_id = self.db.create_run(command, config_hash, seed, datetime.now().isoformat())
        logger.info(f"Started {command} run {run_id} (config {config_hash[:12]}, seed {seed})")
        return run_id

    def end_run(self, run_id: int, exit_code: int, run_dir: Optional[str] = None):
        status = 'completed' if exit_code == 0 else 'failed'
        self.db.update_run(
            run_id,
            end_time=datetime.now().isoformat(),
            status=status,
            exit_code=exit_code,
            run_dir=run_dir,
            system_metrics=json.dumps(self.get_system_metrics()),
        )
        logger.info(f"Ended run {run_id} with status {status} (exit {exit_code})")

    def log_event(self, run_id: int, event_type: str, details: Optional[Dict[str, Any]] = None):
        self.db.create_event(run_id, datetime.now().isoformat(), event_type, json.dumps(details or {}, sort_keys=True))
        logger.debug(f"Logged event {event_type} for run {run_id}")

    def log_error(self, run_id: int, error: BaseException, traceback: str = ''):
        """Log an error for a specific run."""
        self.db.create_error(run_id, datetime.now().isoformat(), type(error).__name__, str(error), traceback)
        logger.error(f"Run {run_id} failed with {type(error).__name__}: {error}")

    def get_system_metrics(self) -> Dict[str, float]:
        """Get system metrics (CPU, memory)."""
        memory_info = psutil.virtual_memory()
        return {
            'cpu_usage': psutil.cpu_percent(interval=None),
            'memory_usage': memory_info.percent,
            'memory_total': memory_info.total,
            'memory_available': memory_info.available,
            'process_rss': psutil.Process().memory_info().rss,
        }
