# core/db.py
from __future__ import annotations
import json
import os
from datetime import datetime, timezone
from typing import List, Optional

from sqlalchemy import create_engine, text

DEFAULT_DB_URL = "sqlite:///censaft_runs.db"


def db_url_from_env() -> str:
    return os.getenv("CENSAFT_DB_URL", DEFAULT_DB_URL)


class StudyStore:
    """シミュレーション結果の保存先（study_runs テーブル）"""

    def __init__(self, url: Optional[str] = None):
        self.engine = create_engine(url or db_url_from_env(), future=True)
        self._init()

    def _init(self):
        with self.engine.begin() as con:
            con.execute(text(
                """
                CREATE TABLE IF NOT EXISTS study_runs(
                    id INTEGER PRIMARY KEY AUTOINCREMENT,
                    config_json TEXT,
                    report_json TEXT,
                    replications INTEGER,
                    failures INTEGER,
                    created_at TEXT
                );
                """
            ))

    def save_study(self, config, report) -> int:
        """config は SimConfig、report は StudyReport（to_dict を持つもの）"""
        with self.engine.begin() as con:
            res = con.execute(
                text("INSERT INTO study_runs(config_json,report_json,replications,failures,created_at) VALUES(:cj,:rj,:rp,:fl,:ca)"),
                {
                    "cj": config.model_dump_json(),
                    "rj": json.dumps(report.to_dict(), sort_keys=True),
                    "rp": report.replications,
                    "fl": report.failure_count,
                    "ca": datetime.now(timezone.utc).isoformat(),
                },
            )
        return int(res.lastrowid)

    def list_studies(self, limit: int = 20) -> List[dict]:
        with self.engine.begin() as con:
            rows = con.execute(
                text("SELECT id, config_json, replications, failures, created_at FROM study_runs ORDER BY id DESC LIMIT :lim"),
                {"lim": int(limit)},
            ).mappings().all()
        out = []
        for r in rows:
            cfg = json.loads(r["config_json"])
            out.append({
                "id": r["id"], "n": cfg.get("n"), "p": cfg.get("p"),
                "target_censoring": cfg.get("target_censoring"), "seed": cfg.get("seed"),
                "replications": r["replications"], "failures": r["failures"],
                "created_at": r["created_at"],
            })
        return out

    def get_study(self, study_id: int) -> Optional[dict]:
        with self.engine.begin() as con:
            row = con.execute(
                text("SELECT * FROM study_runs WHERE id = :id"), {"id": int(study_id)}
            ).mappings().first()
        if row is None:
            return None
        return {
            "id": row["id"],
            "config": json.loads(row["config_json"]),
            "report": json.loads(row["report_json"]),
            "replications": row["replications"],
            "failures": row["failures"],
            "created_at": row["created_at"],
        }

    def get_stats(self):
        with self.engine.begin() as con:
            cnt = con.execute(text("SELECT COUNT(*) FROM study_runs")); total = cnt.scalar()
            reps = con.execute(text("SELECT COALESCE(SUM(replications), 0) FROM study_runs")).scalar()
        return {"studies": total, "replications": int(reps)}
