import sqlite3
from contextlib import contextmanager
from pathlib import Path

from app.config import get_settings


def _connect(path: str | Path | None = None) -> sqlite3.Connection:
    db_path = Path(path or get_settings().checkpoint_db)
    db_path.parent.mkdir(parents=True, exist_ok=True)
    conn = sqlite3.connect(str(db_path))
    conn.row_factory = sqlite3.Row
    conn.execute("PRAGMA journal_mode=WAL")
    return conn


@contextmanager
def get_db(path: str | Path | None = None):
    conn = _connect(path)
    try:
        yield conn
        conn.commit()
    finally:
        conn.close()
