import json
from datetime import datetime, timezone
from pathlib import Path

from app.db.connection import get_db


def insert_replicate(
    study_id: str,
    replicate: int,
    records: list[dict],
    path: str | Path | None = None,
) -> None:
    """Store every method record of one replicate in one transaction."""
    now = datetime.now(timezone.utc).isoformat()
    with get_db(path) as conn:
        conn.executemany(
            """INSERT OR REPLACE INTO replicates
               (study_id, replicate, method, status, payload, created_at)
               VALUES (?,?,?,?,?,?)""",
            [
                (
                    study_id,
                    replicate,
                    r["method"],
                    r["status"],
                    json.dumps(r),
                    now,
                )
                for r in records
            ],
        )


def get_replicates(
    study_id: str, path: str | Path | None = None
) -> list[dict]:
    """Stored records ordered by replicate index, then method."""
    with get_db(path) as conn:
        rows = conn.execute(
            """SELECT payload FROM replicates
               WHERE study_id = ?
               ORDER BY replicate, method""",
            (study_id,),
        ).fetchall()
    return [json.loads(row["payload"]) for row in rows]


def delete_study(study_id: str, path: str | Path | None = None) -> int:
    with get_db(path) as conn:
        cur = conn.execute(
            "DELETE FROM replicates WHERE study_id = ?", (study_id,)
        )
        return cur.rowcount
