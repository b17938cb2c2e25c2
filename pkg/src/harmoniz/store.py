from __future__ import annotations

import json
import os
from pathlib import Path

import logfire

from harmoniz.models import RunRecord

# HARMONIZ_DATA_DIR overrides the local data dir
_data_dir = os.environ.get("HARMONIZ_DATA_DIR")
if _data_dir:
    DATA_DIR = Path(_data_dir)
else:
    DATA_DIR = Path(__file__).parent.parent.parent / "data"

DEFAULT_DB_PATH = DATA_DIR / "runs.json"


class RunStore:
    """JSON list of run records, at most one per run hash.

    A record counts as completed once its metrics are filled in; sweeps
    resume by skipping the run hashes in :meth:`completed`.
    """

    def __init__(self, db_path: Path = DEFAULT_DB_PATH):
        self.db_path = db_path
        self.db_path.parent.mkdir(parents=True, exist_ok=True)
        if not self.db_path.exists():
            self.db_path.write_text("[]")

    def _load(self) -> list[RunRecord]:
        raw = json.loads(self.db_path.read_text())
        return [RunRecord.model_validate(rec) for rec in raw]

    def _save(self, records: list[RunRecord]) -> None:
        self.db_path.write_text(
            json.dumps([rec.model_dump(mode="json") for rec in records], indent=2)
        )

    def add(self, record: RunRecord) -> RunRecord:
        """Store ``record``, replacing an earlier record with the same run hash."""
        self.add_many([record])
        return record

    def add_many(self, records: list[RunRecord]) -> None:
        if not records:
            return
        incoming = {rec.run_hash: rec for rec in records}
        stored = self._load()
        kept = [rec for rec in stored if rec.run_hash not in incoming]
        replaced = len(stored) - len(kept)
        if replaced:
            logfire.info("replacing {replaced} stored runs", replaced=replaced, path=str(self.db_path))
        self._save(kept + list(incoming.values()))

    def list_all(self) -> list[RunRecord]:
        return self._load()

    def get(self, run_id: str) -> RunRecord | None:
        for rec in self._load():
            if rec.run_id == run_id:
                return rec
        return None

    def find_by_hash(self, run_hash: str) -> RunRecord | None:
        for rec in self._load():
            if rec.run_hash == run_hash:
                return rec
        return None

    def completed(self) -> dict[str, RunRecord]:
        """Records with metrics, keyed by run hash."""
        return {rec.run_hash: rec for rec in self._load() if rec.metrics}
