import logging
import os
import time
import uuid
from datetime import datetime, timezone
from typing import Any, Callable, Dict, Optional

import pandas as pd

from src.validators.schema_validator import RUN_MONITOR_SCHEMA, validate_frame

logger = logging.getLogger(__name__)

RUN_MONITOR_FILE = 'runs.csv'
FLOAT_FORMAT = '%.12g'


def write_table(df: pd.DataFrame, path: str, schema=None, table: Optional[str] = None) -> int:
    """Validate (when a schema is given) and write one CSV; returns the row count."""
    if schema is not None:
        df = validate_frame(df, schema, table or os.path.basename(path))
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    df.to_csv(path, index=False, float_format=FLOAT_FORMAT)
    logger.info(f"Wrote {len(df)} rows to {path}")
    return len(df)


def _log_run(output_dir: str, run_id: str, command: str, config_name: Optional[str], started: datetime,
             duration_sec: float, rows_written: int, status: str, error_message: Optional[str] = None):
    """Append one row to the run monitor."""
    row = pd.DataFrame([{
        'run_id': run_id,
        'command': command,
        'config_name': config_name,
        'start_time': started.isoformat(),
        'end_time': datetime.now(timezone.utc).isoformat(),
        'duration_sec': float(duration_sec),
        'rows_written': int(rows_written),
        'status': status,
        'error_message': error_message,
    }])
    row = validate_frame(row, RUN_MONITOR_SCHEMA, RUN_MONITOR_FILE)
    os.makedirs(output_dir, exist_ok=True)
    path = os.path.join(output_dir, RUN_MONITOR_FILE)
    row.to_csv(path, mode='a', header=not os.path.exists(path), index=False)
    logger.info(f"Run logged: {run_id} - {status}")


def monitored_run(command: str, config_name: Optional[str], output_dir: str,
                  action: Callable[[], int]) -> Dict[str, Any]:
    """Run `action` (which returns rows written) and record the outcome in runs.csv.

    Failures are logged and re-raised.
    """
    start_time = time.time()
    started = datetime.now(timezone.utc)
    run_id = str(uuid.uuid4())
    try:
        rows = action()
    except Exception as e:
        duration = time.time() - start_time
        logger.error(f"{command} failed: {e}")
        try:
            _log_run(output_dir, run_id, command, config_name, started, duration, 0, 'failed', str(e))
        except Exception as log_error:
            logger.error(f"Could not record failed run: {log_error}")
        raise
    duration = time.time() - start_time
    _log_run(output_dir, run_id, command, config_name, started, duration, rows, 'success')
    logger.info(f"{command} completed: {rows} rows in {duration:.2f}s")
    return {'run_id': run_id, 'rows_written': rows, 'duration_sec': duration, 'status': 'success'}
