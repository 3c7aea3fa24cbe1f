import sqlite3
import time
import logging
from pathlib import Path
from typing import Any, Dict, Iterable, List, Optional, Union
from datetime import datetime, timezone

from services.stress_harness import DegradationRecord, InstanceArtifact, SettingResult, build_degradation_record

logger = logging.getLogger(__name__)

SCHEMA = """
CREATE TABLE IF NOT EXISTS tasks (
    kind TEXT NOT NULL,
    pde TEXT NOT NULL,
    seed INTEGER NOT NULL,
    status TEXT NOT NULL,
    detail TEXT NOT NULL DEFAULT '',
    updated_at TEXT NOT NULL,
    PRIMARY KEY (kind, pde, seed)
);
CREATE TABLE IF NOT EXISTS records (
    pde TEXT NOT NULL,
    scenario TEXT NOT NULL,
    seed INTEGER NOT NULL,
    setting_id INTEGER NOT NULL,
    setting_value TEXT NOT NULL,
    error REAL,
    e_base REAL NOT NULL,
    d_worst REAL NOT NULL,
    failed INTEGER NOT NULL DEFAULT 0,
    PRIMARY KEY (pde, scenario, seed, setting_id)
);
CREATE TABLE IF NOT EXISTS instances (
    pde TEXT NOT NULL,
    scenario TEXT NOT NULL,
    seed INTEGER NOT NULL,
    setting_id INTEGER NOT NULL,
    instance INTEGER NOT NULL,
    draw INTEGER NOT NULL,
    quantity TEXT NOT NULL,
    value REAL NOT NULL,
    PRIMARY KEY (pde, scenario, seed, setting_id, instance, draw, quantity)
);
"""

RECORD_COLUMNS = ["pde", "scenario", "seed", "setting_id", "setting_value", "error", "e_base", "d_worst"]


def _dict_factory(cursor, row):
    d = {}
    for idx, col in enumerate(cursor.description):
        d[col[0]] = row[idx]
    return d


def _set_pragmas(conn: sqlite3.Connection):
    conn.execute("PRAGMA journal_mode=WAL;")
    conn.execute("PRAGMA synchronous=NORMAL;")
    conn.execute("PRAGMA busy_timeout=5000;")
    conn.execute("PRAGMA temp_store=MEMORY;")


def _retry_locked(fn, retries: int = 5, base_delay: float = 0.1):
    last = None
    for attempt in range(retries):
        try:
            return fn()
        except sqlite3.OperationalError as e:
            if "locked" in str(e).lower():
                logger.warning(f"journal locked, retrying (attempt {attempt + 1}/{retries})")
                time.sleep(base_delay * (2 ** attempt))
                last = e
                continue
            raise
    if last:
        raise last


class ResultsJournal:
    """
    Single-writer store for task status, degradation records and per-instance
    artifacts. Only the scheduler process writes; workers hand results back.
    """

    def __init__(self, db_path: Union[str, Path]):
        self.db_path = str(db_path)
        Path(self.db_path).parent.mkdir(parents=True, exist_ok=True)
        self.initialize()

    def _conn(self):
        conn = sqlite3.connect(self.db_path, timeout=10)
        conn.row_factory = _dict_factory
        _set_pragmas(conn)
        return conn

    def initialize(self) -> None:
        def _do():
            with self._conn() as c:
                c.executescript(SCHEMA)
        _retry_locked(_do)

    def mark_task(self, kind: str, pde: str, seed: int, status: str, detail: str = "") -> None:
        def _do():
            with self._conn() as c:
                c.execute(
                    """INSERT INTO tasks (kind, pde, seed, status, detail, updated_at) VALUES (?, ?, ?, ?, ?, ?)
                       ON CONFLICT(kind, pde, seed) DO UPDATE SET status=excluded.status,
                       detail=excluded.detail, updated_at=excluded.updated_at""",
                    (kind, pde, int(seed), status, detail, datetime.now(timezone.utc).isoformat()),
                )
        _retry_locked(_do)

    def task_status(self, kind: str, pde: str, seed: int) -> Optional[str]:
        with self._conn() as c:
            r = c.execute("SELECT status FROM tasks WHERE kind=? AND pde=? AND seed=?", (kind, pde, int(seed))).fetchone()
            return r["status"] if r else None

    def tasks(self, kind: Optional[str] = None) -> List[Dict[str, Any]]:
        with self._conn() as c:
            if kind is None:
                return c.execute("SELECT * FROM tasks ORDER BY kind, pde, seed").fetchall()
            return c.execute("SELECT * FROM tasks WHERE kind=? ORDER BY pde, seed", (kind,)).fetchall()

    def add_record(self, record: DegradationRecord) -> None:
        rows = [
            (record.pde.value, record.scenario.value, record.seed, s.setting_id, s.setting_value,
             s.error, record.e_base, record.d, int(s.failed))
            for s in record.settings
        ]

        def _do():
            with self._conn() as c:
                c.execute("DELETE FROM records WHERE pde=? AND scenario=? AND seed=?",
                          (record.pde.value, record.scenario.value, record.seed))
                c.executemany(
                    """INSERT INTO records (pde, scenario, seed, setting_id, setting_value, error, e_base, d_worst, failed)
                       VALUES (?, ?, ?, ?, ?, ?, ?, ?, ?)""",
                    rows,
                )
        _retry_locked(_do)

    def add_records(self, records: Iterable[DegradationRecord]) -> None:
        for record in records:
            self.add_record(record)

    def add_instances(self, pde: str, scenario: str, seed: int, artifacts: Iterable[InstanceArtifact]) -> None:
        rows = [(pde, scenario, int(seed), a.setting_id, a.instance, a.draw, a.quantity, float(a.value))
                for a in artifacts]

        def _do():
            with self._conn() as c:
                c.execute("DELETE FROM instances WHERE pde=? AND scenario=? AND seed=?", (pde, scenario, int(seed)))
                c.executemany(
                    """INSERT INTO instances (pde, scenario, seed, setting_id, instance, draw, quantity, value)
                       VALUES (?, ?, ?, ?, ?, ?, ?, ?)""",
                    rows,
                )
        _retry_locked(_do)

    def fetch_records(self, include_failed: bool = False) -> List[Dict[str, Any]]:
        query = "SELECT * FROM records"
        if not include_failed:
            query += " WHERE failed=0"
        with self._conn() as c:
            return c.execute(query + " ORDER BY pde, scenario, seed, setting_id").fetchall()

    def fetch_instances(self, pde: str, scenario: str, seed: int) -> List[InstanceArtifact]:
        with self._conn() as c:
            rows = c.execute(
                """SELECT setting_id, instance, draw, quantity, value FROM instances
                   WHERE pde=? AND scenario=? AND seed=? ORDER BY setting_id, instance, draw, quantity""",
                (pde, scenario, int(seed)),
            ).fetchall()
        return [InstanceArtifact(**r) for r in rows]

    def degradation_records(self) -> List[DegradationRecord]:
        """Rebuild one record per (pde, scenario, seed) from the stored setting rows."""
        grouped: Dict[tuple, List[Dict[str, Any]]] = {}
        for row in self.fetch_records(include_failed=True):
            grouped.setdefault((row["pde"], row["scenario"], row["seed"]), []).append(row)
        records = []
        for (pde, scenario, seed), rows in grouped.items():
            settings = [SettingResult(setting_id=r["setting_id"], setting_value=r["setting_value"],
                                      error=r["error"], failed=bool(r["failed"])) for r in rows]
            records.append(build_degradation_record(settings, rows[0]["e_base"],
                                                    pde=pde, scenario=scenario, seed=seed))
        return records
