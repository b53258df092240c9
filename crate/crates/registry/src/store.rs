//! Embedded relational store: units, attributed power, aggregates, emission
//! factors, purge queue and attribution watermarks.
//!
//! One writer connection serializes all writes; readers take a connection
//! from a small pool and see a consistent snapshot under WAL.

use std::path::{Path, PathBuf};
use std::time::Duration;

use parking_lot::Mutex;
use rusqlite::{params, Connection, OpenFlags, OptionalExtension, Row};
use wattline_core::workload::ResourceManager;
use wattline_core::{AggregateMetrics, Scope, WorkloadUnit};

use crate::RegistryError;

const SCHEMA: &str = "
CREATE TABLE IF NOT EXISTS units (
    cluster_id TEXT NOT NULL,
    uuid TEXT NOT NULL,
    resource_manager TEXT NOT NULL,
    user TEXT NOT NULL,
    project TEXT NOT NULL,
    created_at INTEGER NOT NULL,
    started_at INTEGER NOT NULL,
    ended_at INTEGER,
    alloc_cpus INTEGER NOT NULL,
    alloc_memory_bytes INTEGER NOT NULL,
    gpu_indices TEXT NOT NULL,
    instance TEXT,
    purged INTEGER NOT NULL DEFAULT 0,
    PRIMARY KEY (cluster_id, uuid)
);
CREATE INDEX IF NOT EXISTS units_user ON units (user);
CREATE INDEX IF NOT EXISTS units_project ON units (project);
CREATE TABLE IF NOT EXISTS unit_power (
    cluster_id TEXT NOT NULL,
    uuid TEXT NOT NULL,
    ts INTEGER NOT NULL,
    watts REAL NOT NULL,
    cpu_watts REAL NOT NULL,
    dram_watts REAL NOT NULL,
    network_watts REAL NOT NULL,
    PRIMARY KEY (cluster_id, uuid, ts)
) WITHOUT ROWID;
CREATE TABLE IF NOT EXISTS node_residual (
    instance TEXT NOT NULL,
    ts INTEGER NOT NULL,
    watts REAL NOT NULL,
    PRIMARY KEY (instance, ts)
) WITHOUT ROWID;
CREATE TABLE IF NOT EXISTS unit_aggregates (
    cluster_id TEXT NOT NULL,
    uuid TEXT NOT NULL,
    window_start INTEGER NOT NULL,
    window_end INTEGER NOT NULL,
    wall_seconds REAL NOT NULL,
    cpu_time_seconds REAL NOT NULL,
    cpu_fraction REAL NOT NULL,
    memory_fraction REAL NOT NULL,
    energy_kwh REAL NOT NULL,
    cpu_energy_kwh REAL NOT NULL,
    dram_energy_kwh REAL NOT NULL,
    network_energy_kwh REAL NOT NULL,
    emissions_grams REAL NOT NULL,
    gpu_fraction REAL,
    no_data INTEGER NOT NULL,
    final INTEGER NOT NULL,
    PRIMARY KEY (cluster_id, uuid)
);
CREATE TABLE IF NOT EXISTS emission_factors (
    region TEXT NOT NULL,
    ts INTEGER NOT NULL,
    grams_per_kwh REAL NOT NULL,
    PRIMARY KEY (region, ts)
) WITHOUT ROWID;
CREATE TABLE IF NOT EXISTS purge_queue (
    cluster_id TEXT NOT NULL,
    uuid TEXT NOT NULL,
    selector TEXT NOT NULL,
    attempts INTEGER NOT NULL DEFAULT 0,
    last_error TEXT,
    PRIMARY KEY (cluster_id, uuid)
);
CREATE TABLE IF NOT EXISTS watermarks (
    instance TEXT PRIMARY KEY,
    ts INTEGER NOT NULL
);
";

/// A unit together with the registry's bookkeeping.
#[derive(Debug, Clone, PartialEq)]
pub struct StoredUnit {
    pub unit: WorkloadUnit,
    /// Node the unit's power was attributed on, once seen.
    pub instance: Option<String>,
    pub purged: bool,
}

/// One attributed power sample of a unit.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PowerRow {
    pub timestamp_ms: i64,
    pub watts: f64,
    pub cpu_watts: f64,
    pub dram_watts: f64,
    pub network_watts: f64,
}

/// Filters for [`Store::units`]; the window keeps units overlapping it.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct UnitFilter {
    pub user: Option<String>,
    pub project: Option<String>,
    pub start_ms: Option<i64>,
    pub end_ms: Option<i64>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PendingPurge {
    pub cluster_id: String,
    pub uuid: String,
    pub selector: String,
    pub attempts: u32,
}

pub struct Store {
    path: PathBuf,
    writer: Mutex<Connection>,
    readers: Mutex<Vec<Connection>>,
}

impl std::fmt::Debug for Store {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Store").field("path", &self.path).finish()
    }
}

fn sql(e: rusqlite::Error) -> RegistryError {
    RegistryError::Store(e.to_string())
}

fn unit_from_row(row: &Row<'_>) -> rusqlite::Result<StoredUnit> {
    let manager: String = row.get("resource_manager")?;
    let gpus: String = row.get("gpu_indices")?;
    Ok(StoredUnit {
        unit: WorkloadUnit {
            cluster_id: row.get("cluster_id")?,
            uuid: row.get("uuid")?,
            resource_manager: manager.parse().unwrap_or(ResourceManager::Slurm),
            user: row.get("user")?,
            project: row.get("project")?,
            created_at_ms: row.get("created_at")?,
            started_at_ms: row.get("started_at")?,
            ended_at_ms: row.get("ended_at")?,
            alloc_cpus: row.get("alloc_cpus")?,
            alloc_memory_bytes: row.get::<_, i64>("alloc_memory_bytes")? as u64,
            gpu_indices: gpus
                .split(',')
                .filter(|s| !s.is_empty())
                .filter_map(|s| s.parse().ok())
                .collect(),
        },
        instance: row.get("instance")?,
        purged: row.get::<_, i64>("purged")? != 0,
    })
}

fn aggregate_from_row(row: &Row<'_>, scope: Scope, key: String) -> rusqlite::Result<(AggregateMetrics, bool)> {
    Ok((
        AggregateMetrics {
            scope,
            key,
            window_start_ms: row.get("window_start")?,
            window_end_ms: row.get("window_end")?,
            wall_seconds: row.get("wall_seconds")?,
            total_cpu_time_seconds: row.get("cpu_time_seconds")?,
            avg_cpu_usage_fraction: row.get("cpu_fraction")?,
            avg_memory_usage_fraction: row.get("memory_fraction")?,
            total_energy_kwh: row.get("energy_kwh")?,
            cpu_energy_kwh: row.get("cpu_energy_kwh")?,
            dram_energy_kwh: row.get("dram_energy_kwh")?,
            network_energy_kwh: row.get("network_energy_kwh")?,
            total_emissions_grams: row.get("emissions_grams")?,
            avg_gpu_usage_fraction: row.get("gpu_fraction")?,
            no_data: row.get::<_, i64>("no_data")? != 0,
        },
        row.get::<_, i64>("final")? != 0,
    ))
}

impl Store {
    /// Opens (creating if needed) the store at `path`.
    pub fn open(path: &Path) -> Result<Self, RegistryError> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| RegistryError::io(dir, e))?;
        }
        let conn = Connection::open(path).map_err(sql)?;
        conn.busy_timeout(Duration::from_secs(5)).map_err(sql)?;
        conn.pragma_update(None, "journal_mode", "WAL").map_err(sql)?;
        conn.pragma_update(None, "synchronous", "NORMAL").map_err(sql)?;
        conn.execute_batch(SCHEMA).map_err(sql)?;
        Ok(Self {
            path: path.to_path_buf(),
            writer: Mutex::new(conn),
            readers: Mutex::new(Vec::new()),
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    fn read<T>(&self, f: impl FnOnce(&Connection) -> rusqlite::Result<T>) -> Result<T, RegistryError> {
        let conn = match self.readers.lock().pop() {
            Some(c) => c,
            None => {
                let c = Connection::open_with_flags(
                    &self.path,
                    OpenFlags::SQLITE_OPEN_READ_ONLY | OpenFlags::SQLITE_OPEN_NO_MUTEX,
                )
                .map_err(sql)?;
                c.busy_timeout(Duration::from_secs(5)).map_err(sql)?;
                c
            }
        };
        let out = f(&conn).map_err(sql);
        let mut pool = self.readers.lock();
        if pool.len() < 8 {
            pool.push(conn);
        }
        out
    }

    fn write<T>(&self, f: impl FnOnce(&mut Connection) -> rusqlite::Result<T>) -> Result<T, RegistryError> {
        f(&mut self.writer.lock()).map_err(sql)
    }

    /// Inserts new units and updates known ones in place. Returns the
    /// number of rows upserted.
    pub fn upsert_units(&self, units: &[WorkloadUnit]) -> Result<usize, RegistryError> {
        self.write(|conn| {
            let tx = conn.transaction()?;
            let mut n = 0;
            {
                let mut stmt = tx.prepare_cached(
                    "INSERT INTO units (cluster_id, uuid, resource_manager, user, project, created_at,
                        started_at, ended_at, alloc_cpus, alloc_memory_bytes, gpu_indices)
                     VALUES (?1, ?2, ?3, ?4, ?5, ?6, ?7, ?8, ?9, ?10, ?11)
                     ON CONFLICT (cluster_id, uuid) DO UPDATE SET
                        resource_manager = excluded.resource_manager, user = excluded.user,
                        project = excluded.project, created_at = excluded.created_at,
                        started_at = excluded.started_at, ended_at = excluded.ended_at,
                        alloc_cpus = excluded.alloc_cpus, alloc_memory_bytes = excluded.alloc_memory_bytes,
                        gpu_indices = excluded.gpu_indices",
                )?;
                for u in units {
                    let gpus: Vec<String> = u.gpu_indices.iter().map(u32::to_string).collect();
                    n += stmt.execute(params![
                        u.cluster_id,
                        u.uuid,
                        u.resource_manager.as_str(),
                        u.user,
                        u.project,
                        u.created_at_ms,
                        u.started_at_ms,
                        u.ended_at_ms,
                        u.alloc_cpus,
                        u.alloc_memory_bytes as i64,
                        gpus.join(","),
                    ])?;
                }
            }
            tx.commit()?;
            Ok(n)
        })
    }

    pub fn unit_count(&self) -> Result<usize, RegistryError> {
        self.read(|c| c.query_row("SELECT COUNT(*) FROM units", [], |r| r.get::<_, i64>(0)))
            .map(|n| n as usize)
    }

    pub fn unit(&self, cluster_id: &str, uuid: &str) -> Result<Option<StoredUnit>, RegistryError> {
        self.read(|c| {
            c.query_row(
                "SELECT * FROM units WHERE cluster_id = ?1 AND uuid = ?2",
                params![cluster_id, uuid],
                unit_from_row,
            )
            .optional()
        })
    }

    /// Units matching `filter`, ordered by start then uuid.
    pub fn units(&self, filter: &UnitFilter) -> Result<Vec<StoredUnit>, RegistryError> {
        self.read(|c| {
            let mut stmt = c.prepare_cached(
                "SELECT * FROM units
                 WHERE (?1 IS NULL OR user = ?1) AND (?2 IS NULL OR project = ?2)
                   AND (?3 IS NULL OR ended_at IS NULL OR ended_at >= ?3)
                   AND (?4 IS NULL OR started_at <= ?4)
                 ORDER BY started_at, uuid",
            )?;
            let rows = stmt.query_map(
                params![filter.user, filter.project, filter.start_ms, filter.end_ms],
                unit_from_row,
            )?;
            rows.collect()
        })
    }

    /// True iff the unit exists and belongs to `user`.
    pub fn is_owner(&self, user: &str, cluster_id: &str, uuid: &str) -> Result<bool, RegistryError> {
        self.read(|c| {
            c.query_row(
                "SELECT EXISTS (SELECT 1 FROM units WHERE cluster_id = ?1 AND uuid = ?2 AND user = ?3)",
                params![cluster_id, uuid, user],
                |r| r.get::<_, bool>(0),
            )
        })
    }

    /// Stores attributed power and records the node each unit ran on.
    pub fn insert_power(
        &self,
        cluster_id: &str,
        instance: &str,
        rows: &[(String, PowerRow)],
    ) -> Result<usize, RegistryError> {
        self.write(|conn| {
            let tx = conn.transaction()?;
            let mut n = 0;
            {
                let mut ins = tx.prepare_cached(
                    "INSERT OR REPLACE INTO unit_power (cluster_id, uuid, ts, watts, cpu_watts, dram_watts, network_watts)
                     VALUES (?1, ?2, ?3, ?4, ?5, ?6, ?7)",
                )?;
                let mut node = tx.prepare_cached(
                    "UPDATE units SET instance = ?3 WHERE cluster_id = ?1 AND uuid = ?2 AND instance IS NULL",
                )?;
                let mut last: Option<&str> = None;
                for (uuid, r) in rows {
                    n += ins.execute(params![
                        cluster_id,
                        uuid,
                        r.timestamp_ms,
                        r.watts,
                        r.cpu_watts,
                        r.dram_watts,
                        r.network_watts
                    ])?;
                    if last != Some(uuid.as_str()) {
                        node.execute(params![cluster_id, uuid, instance])?;
                        last = Some(uuid.as_str());
                    }
                }
            }
            tx.commit()?;
            Ok(n)
        })
    }

    /// Power rows of a unit, oldest first.
    pub fn power(&self, cluster_id: &str, uuid: &str) -> Result<Vec<PowerRow>, RegistryError> {
        self.read(|c| {
            let mut stmt = c.prepare_cached(
                "SELECT ts, watts, cpu_watts, dram_watts, network_watts FROM unit_power
                 WHERE cluster_id = ?1 AND uuid = ?2 ORDER BY ts",
            )?;
            let rows = stmt.query_map(params![cluster_id, uuid], |r| {
                Ok(PowerRow {
                    timestamp_ms: r.get(0)?,
                    watts: r.get(1)?,
                    cpu_watts: r.get(2)?,
                    dram_watts: r.get(3)?,
                    network_watts: r.get(4)?,
                })
            })?;
            rows.collect()
        })
    }

    pub fn insert_residual(&self, instance: &str, points: &[(i64, f64)]) -> Result<(), RegistryError> {
        self.write(|conn| {
            let tx = conn.transaction()?;
            {
                let mut stmt = tx
                    .prepare_cached("INSERT OR REPLACE INTO node_residual (instance, ts, watts) VALUES (?1, ?2, ?3)")?;
                for (ts, w) in points {
                    stmt.execute(params![instance, ts, w])?;
                }
            }
            tx.commit()
        })
    }

    pub fn residual(&self, instance: &str) -> Result<Vec<(i64, f64)>, RegistryError> {
        self.read(|c| {
            let mut stmt = c.prepare_cached("SELECT ts, watts FROM node_residual WHERE instance = ?1 ORDER BY ts")?;
            let rows = stmt.query_map(params![instance], |r| Ok((r.get(0)?, r.get(1)?)))?;
            rows.collect()
        })
    }

    pub fn watermark(&self, instance: &str) -> Result<Option<i64>, RegistryError> {
        self.read(|c| {
            c.query_row(
                "SELECT ts FROM watermarks WHERE instance = ?1",
                params![instance],
                |r| r.get(0),
            )
            .optional()
        })
    }

    pub fn set_watermark(&self, instance: &str, ts: i64) -> Result<(), RegistryError> {
        self.write(|c| {
            c.execute(
                "INSERT INTO watermarks (instance, ts) VALUES (?1, ?2)
                 ON CONFLICT (instance) DO UPDATE SET ts = max(ts, excluded.ts)",
                params![instance, ts],
            )
            .map(|_| ())
        })
    }

    pub fn insert_factor(&self, region: &str, ts: i64, grams_per_kwh: f64) -> Result<(), RegistryError> {
        self.write(|c| {
            c.execute(
                "INSERT OR REPLACE INTO emission_factors (region, ts, grams_per_kwh) VALUES (?1, ?2, ?3)",
                params![region, ts, grams_per_kwh],
            )
            .map(|_| ())
        })
    }

    pub fn factors(&self, region: &str) -> Result<Vec<(i64, f64)>, RegistryError> {
        self.read(|c| {
            let mut stmt =
                c.prepare_cached("SELECT ts, grams_per_kwh FROM emission_factors WHERE region = ?1 ORDER BY ts")?;
            let rows = stmt.query_map(params![region], |r| Ok((r.get(0)?, r.get(1)?)))?;
            rows.collect()
        })
    }

    /// Units whose aggregate is missing or still provisional.
    pub fn units_needing_aggregation(&self, cluster_id: &str) -> Result<Vec<StoredUnit>, RegistryError> {
        self.read(|c| {
            let mut stmt = c.prepare_cached(
                "SELECT u.* FROM units u
                 LEFT JOIN unit_aggregates a ON a.cluster_id = u.cluster_id AND a.uuid = u.uuid
                 WHERE u.cluster_id = ?1 AND (a.final IS NULL OR a.final = 0)
                 ORDER BY u.started_at, u.uuid",
            )?;
            let rows = stmt.query_map(params![cluster_id], unit_from_row)?;
            rows.collect()
        })
    }

    pub fn put_aggregate(&self, cluster_id: &str, m: &AggregateMetrics, is_final: bool) -> Result<(), RegistryError> {
        self.write(|c| {
            c.execute(
                "INSERT OR REPLACE INTO unit_aggregates (cluster_id, uuid, window_start, window_end, wall_seconds,
                    cpu_time_seconds, cpu_fraction, memory_fraction, energy_kwh, cpu_energy_kwh, dram_energy_kwh,
                    network_energy_kwh, emissions_grams, gpu_fraction, no_data, final)
                 VALUES (?1, ?2, ?3, ?4, ?5, ?6, ?7, ?8, ?9, ?10, ?11, ?12, ?13, ?14, ?15, ?16)",
                params![
                    cluster_id,
                    m.key,
                    m.window_start_ms,
                    m.window_end_ms,
                    m.wall_seconds,
                    m.total_cpu_time_seconds,
                    m.avg_cpu_usage_fraction,
                    m.avg_memory_usage_fraction,
                    m.total_energy_kwh,
                    m.cpu_energy_kwh,
                    m.dram_energy_kwh,
                    m.network_energy_kwh,
                    m.total_emissions_grams,
                    m.avg_gpu_usage_fraction,
                    m.no_data,
                    is_final
                ],
            )
            .map(|_| ())
        })
    }

    /// The stored aggregate of one unit and whether it is final.
    pub fn aggregate(&self, cluster_id: &str, uuid: &str) -> Result<Option<(AggregateMetrics, bool)>, RegistryError> {
        self.read(|c| {
            c.query_row(
                "SELECT * FROM unit_aggregates WHERE cluster_id = ?1 AND uuid = ?2",
                params![cluster_id, uuid],
                |r| aggregate_from_row(r, Scope::Unit, uuid.to_string()),
            )
            .optional()
        })
    }

    /// Unit aggregates of a user or project for units overlapping the window.
    pub fn scope_aggregates(
        &self,
        scope: Scope,
        key: &str,
        start_ms: i64,
        end_ms: i64,
    ) -> Result<Vec<AggregateMetrics>, RegistryError> {
        let column = match scope {
            Scope::Unit => "u.uuid",
            Scope::User => "u.user",
            Scope::Project => "u.project",
        };
        self.read(|c| {
            let mut stmt = c.prepare(&format!(
                "SELECT a.*, u.uuid AS unit_uuid FROM unit_aggregates a
                 JOIN units u ON u.cluster_id = a.cluster_id AND u.uuid = a.uuid
                 WHERE {column} = ?1 AND u.started_at <= ?3 AND (u.ended_at IS NULL OR u.ended_at >= ?2)
                 ORDER BY u.started_at, u.uuid"
            ))?;
            let rows = stmt.query_map(params![key, start_ms, end_ms], |r| {
                aggregate_from_row(r, Scope::Unit, r.get("unit_uuid")?).map(|(m, _)| m)
            })?;
            rows.collect()
        })
    }

    /// Ended, unpurged units whose aggregate is final.
    pub fn finalized_unpurged(&self, cluster_id: &str) -> Result<Vec<StoredUnit>, RegistryError> {
        self.read(|c| {
            let mut stmt = c.prepare_cached(
                "SELECT u.* FROM units u
                 JOIN unit_aggregates a ON a.cluster_id = u.cluster_id AND a.uuid = u.uuid
                 WHERE u.cluster_id = ?1 AND a.final = 1 AND u.purged = 0 AND u.ended_at IS NOT NULL
                 ORDER BY u.started_at, u.uuid",
            )?;
            let rows = stmt.query_map(params![cluster_id], unit_from_row)?;
            rows.collect()
        })
    }

    /// Marks the unit purged and queues its series deletion.
    pub fn enqueue_purge(&self, cluster_id: &str, uuid: &str, selector: &str) -> Result<(), RegistryError> {
        self.write(|conn| {
            let tx = conn.transaction()?;
            tx.execute(
                "UPDATE units SET purged = 1 WHERE cluster_id = ?1 AND uuid = ?2",
                params![cluster_id, uuid],
            )?;
            tx.execute(
                "INSERT OR IGNORE INTO purge_queue (cluster_id, uuid, selector) VALUES (?1, ?2, ?3)",
                params![cluster_id, uuid, selector],
            )?;
            tx.commit()
        })
    }

    pub fn pending_purges(&self) -> Result<Vec<PendingPurge>, RegistryError> {
        self.read(|c| {
            let mut stmt =
                c.prepare_cached("SELECT cluster_id, uuid, selector, attempts FROM purge_queue ORDER BY rowid")?;
            let rows = stmt.query_map([], |r| {
                Ok(PendingPurge {
                    cluster_id: r.get(0)?,
                    uuid: r.get(1)?,
                    selector: r.get(2)?,
                    attempts: r.get(3)?,
                })
            })?;
            rows.collect()
        })
    }

    pub fn complete_purge(&self, cluster_id: &str, uuid: &str) -> Result<(), RegistryError> {
        self.write(|c| {
            c.execute(
                "DELETE FROM purge_queue WHERE cluster_id = ?1 AND uuid = ?2",
                params![cluster_id, uuid],
            )
            .map(|_| ())
        })
    }

    pub fn fail_purge(&self, cluster_id: &str, uuid: &str, error: &str) -> Result<(), RegistryError> {
        self.write(|c| {
            c.execute(
                "UPDATE purge_queue SET attempts = attempts + 1, last_error = ?3 WHERE cluster_id = ?1 AND uuid = ?2",
                params![cluster_id, uuid, error],
            )
            .map(|_| ())
        })
    }

    /// Row counts per table, for diagnostics and restore checks.
    pub fn table_counts(&self) -> Result<Vec<(String, usize)>, RegistryError> {
        self.read(|c| {
            let tables = [
                "units",
                "unit_power",
                "node_residual",
                "unit_aggregates",
                "emission_factors",
                "purge_queue",
                "watermarks",
            ];
            tables
                .iter()
                .map(|t| {
                    let n: i64 = c.query_row(&format!("SELECT COUNT(*) FROM {t}"), [], |r| r.get(0))?;
                    Ok((t.to_string(), n as usize))
                })
                .collect()
        })
    }

    /// Writes a point-in-time copy of the store to `dest`. The copy goes to
    /// a temporary file that is renamed into place, so a failed backup
    /// leaves any previous file at `dest` untouched.
    pub fn backup_to(&self, dest: &Path) -> Result<(), RegistryError> {
        let dir = dest
            .parent()
            .filter(|d| !d.as_os_str().is_empty())
            .unwrap_or(Path::new("."));
        std::fs::create_dir_all(dir).map_err(|e| RegistryError::io(dir, e))?;
        let tmp = dir.join(format!(
            ".{}.tmp",
            dest.file_name().and_then(|n| n.to_str()).unwrap_or("backup")
        ));
        let result = self
            .read(|src| {
                let mut dst = Connection::open(&tmp)?;
                let backup = rusqlite::backup::Backup::new(src, &mut dst)?;
                backup.run_to_completion(i32::MAX, Duration::ZERO, None)?;
                drop(backup);
                dst.pragma_update(None, "journal_mode", "DELETE")?;
                Ok(())
            })
            .and_then(|_| std::fs::rename(&tmp, dest).map_err(|e| RegistryError::io(dest, e)));
        if result.is_err() {
            let _ = std::fs::remove_file(&tmp);
        }
        result
    }
}
