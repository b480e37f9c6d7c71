from pathlib import Path

from app.db.connection import get_db

CHECKPOINT_SCHEMA_VERSION = 1


def init_db(path: str | Path | None = None) -> None:
    with get_db(path) as conn:
        conn.executescript("""
            CREATE TABLE IF NOT EXISTS meta (
                key         TEXT PRIMARY KEY,
                value       TEXT NOT NULL
            );

            CREATE TABLE IF NOT EXISTS replicates (
                study_id    TEXT NOT NULL,
                replicate   INTEGER NOT NULL,
                method      TEXT NOT NULL,
                status      TEXT NOT NULL,
                payload     TEXT NOT NULL,
                created_at  TEXT NOT NULL,
                PRIMARY KEY (study_id, replicate, method)
            );

            CREATE INDEX IF NOT EXISTS idx_replicates_study
                ON replicates(study_id);
        """)
        conn.execute(
            "INSERT OR IGNORE INTO meta (key, value) VALUES (?, ?)",
            ("schema_version", str(CHECKPOINT_SCHEMA_VERSION)),
        )
