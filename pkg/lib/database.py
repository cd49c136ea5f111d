"""
SQLite run ledger: one row per command invocation plus its metrics rows
"""

import json
import logging
import sqlite3
from contextlib import contextmanager
from datetime import datetime

import psutil

logger = logging.getLogger(__name__)


class RunLedger:
    """Records runs and their metrics in the output root"""

    def __init__(self, db_path='ledger.db'):
        self.db_path = str(db_path)
        self._init_database()

    def _init_database(self):
        """Initialize database schema"""
        with self._get_connection() as conn:
            cursor = conn.cursor()

            cursor.execute('''
                CREATE TABLE IF NOT EXISTS runs (
                    id INTEGER PRIMARY KEY AUTOINCREMENT,
                    name TEXT NOT NULL,
                    command TEXT NOT NULL,
                    run_dir TEXT,
                    config TEXT,
                    status TEXT DEFAULT 'running',
                    error_message TEXT,

                    -- Host facts at start
                    cpu_count INTEGER,
                    memory_total_bytes INTEGER,
                    memory_available_bytes INTEGER,

                    started_at TEXT DEFAULT CURRENT_TIMESTAMP,
                    finished_at TEXT
                )
            ''')

            cursor.execute('''
                CREATE TABLE IF NOT EXISTS metrics (
                    id INTEGER PRIMARY KEY AUTOINCREMENT,
                    run_id INTEGER NOT NULL,
                    step INTEGER,
                    train_loss REAL,
                    val_loss REAL,
                    val_ppl REAL,
                    lr REAL,
                    wall_ms REAL,
                    val_accuracy REAL,
                    FOREIGN KEY (run_id) REFERENCES runs(id)
                )
            ''')

            cursor.execute('CREATE INDEX IF NOT EXISTS idx_metrics_run ON metrics(run_id, step)')
            cursor.execute('CREATE INDEX IF NOT EXISTS idx_runs_name ON runs(name)')

            self._migrate_database(cursor)

            conn.commit()
            logger.debug(f"Run ledger ready at {self.db_path}")

    def _migrate_database(self, cursor):
        """Add columns introduced after a ledger was first created"""
        try:
            cursor.execute("PRAGMA table_info(metrics)")
            columns = [row[1] for row in cursor.fetchall()]
            if 'val_accuracy' not in columns:
                cursor.execute("ALTER TABLE metrics ADD COLUMN val_accuracy REAL")
                logger.info("Added val_accuracy column")
        except sqlite3.Error as e:
            logger.warning(f"Migration warning: {e}")

    @contextmanager
    def _get_connection(self):
        """Context manager for database connections"""
        conn = sqlite3.connect(self.db_path)
        conn.row_factory = sqlite3.Row
        try:
            yield conn
        finally:
            conn.close()

    def start_run(self, name, command, run_dir, config):
        memory = psutil.virtual_memory()
        with self._get_connection() as conn:
            cursor = conn.cursor()
            cursor.execute('''
                INSERT INTO runs (name, command, run_dir, config, cpu_count,
                                  memory_total_bytes, memory_available_bytes, started_at)
                VALUES (?, ?, ?, ?, ?, ?, ?, ?)
            ''', (
                name, command, str(run_dir), json.dumps(config, sort_keys=True),
                psutil.cpu_count(logical=True), memory.total, memory.available,
                datetime.now().isoformat(),
            ))
            conn.commit()
            run_id = cursor.lastrowid
        logger.info(f"Run {run_id} ({name}) recorded in ledger")
        return run_id

    def finish_run(self, run_id, status='completed', error_message=None):
        with self._get_connection() as conn:
            conn.execute(
                'UPDATE runs SET status = ?, error_message = ?, finished_at = ? WHERE id = ?',
                (status, error_message, datetime.now().isoformat(), run_id),
            )
            conn.commit()

    def add_metrics(self, run_id, record):
        with self._get_connection() as conn:
            conn.execute('''
                INSERT INTO metrics (run_id, step, train_loss, val_loss, val_ppl, lr, wall_ms, val_accuracy)
                VALUES (?, ?, ?, ?, ?, ?, ?, ?)
            ''', (
                run_id, record.step, record.train_loss, record.val_loss, record.val_ppl,
                record.lr, record.wall_ms, record.val_accuracy,
            ))
            conn.commit()

    def get_run(self, run_id):
        with self._get_connection() as conn:
            row = conn.execute('SELECT * FROM runs WHERE id = ?', (run_id,)).fetchone()
            return dict(row) if row else None

    def get_metrics(self, run_id):
        with self._get_connection() as conn:
            rows = conn.execute('SELECT * FROM metrics WHERE run_id = ? ORDER BY step', (run_id,)).fetchall()
            return [dict(r) for r in rows]

    def final_metrics(self, run_id):
        """The last metrics row of a run, or None"""
        with self._get_connection() as conn:
            row = conn.execute(
                'SELECT * FROM metrics WHERE run_id = ? ORDER BY step DESC LIMIT 1', (run_id,)
            ).fetchone()
            return dict(row) if row else None

    def list_runs(self, status=None):
        query = 'SELECT * FROM runs'
        params = ()
        if status:
            query += ' WHERE status = ?'
            params = (status,)
        with self._get_connection() as conn:
            return [dict(r) for r in conn.execute(query + ' ORDER BY id', params).fetchall()]
