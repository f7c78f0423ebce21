//! CSV serialization of the benchmark's data streams.
//!
//! All files carry a header row; numeric fields are written with Rust's
//! shortest round-trip float formatting, so writing and re-reading a file
//! is lossless and byte-stable across runs.

use std::path::Path;

use anyhow::{Context, Result};
use nalgebra::{Quaternion, UnitQuaternion, Vector2, Vector3};
use vio_core::{BccRow, BiasRow, BodyState, FrameObs, ImuSample, WeightRow};

fn writer(path: &Path) -> Result<csv::Writer<std::fs::File>> {
    csv::Writer::from_path(path).with_context(|| format!("creating {}", path.display()))
}

fn reader(path: &Path) -> Result<csv::Reader<std::fs::File>> {
    csv::Reader::from_path(path).with_context(|| format!("opening {}", path.display()))
}

fn field(rec: &csv::StringRecord, i: usize) -> Result<f64> {
    rec.get(i)
        .with_context(|| format!("missing column {i}"))?
        .parse::<f64>()
        .with_context(|| format!("parsing column {i} of {rec:?}"))
}

pub fn write_imu_csv(path: &Path, samples: &[ImuSample]) -> Result<()> {
    let mut w = writer(path)?;
    w.write_record(["stamp", "ax", "ay", "az", "wx", "wy", "wz"])?;
    for s in samples {
        w.write_record([
            s.stamp.to_string(),
            s.a.x.to_string(),
            s.a.y.to_string(),
            s.a.z.to_string(),
            s.w.x.to_string(),
            s.w.y.to_string(),
            s.w.z.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_imu_csv(path: &Path) -> Result<Vec<ImuSample>> {
    let mut out = Vec::new();
    for rec in reader(path)?.records() {
        let r = rec?;
        out.push(ImuSample {
            stamp: field(&r, 0)?,
            a: Vector3::new(field(&r, 1)?, field(&r, 2)?, field(&r, 3)?),
            w: Vector3::new(field(&r, 4)?, field(&r, 5)?, field(&r, 6)?),
        });
    }
    Ok(out)
}

pub fn write_frames_csv(path: &Path, frames: &[FrameObs]) -> Result<()> {
    let mut w = writer(path)?;
    w.write_record(["stamp", "feature_id", "u", "v"])?;
    for f in frames {
        for (id, px) in &f.obs {
            w.write_record([
                f.stamp.to_string(),
                id.to_string(),
                px.x.to_string(),
                px.y.to_string(),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_frames_csv(path: &Path) -> Result<Vec<FrameObs>> {
    let mut out: Vec<FrameObs> = Vec::new();
    for rec in reader(path)?.records() {
        let r = rec?;
        let stamp = field(&r, 0)?;
        let id: u64 = r.get(1).context("missing feature_id")?.parse()?;
        let px = Vector2::new(field(&r, 2)?, field(&r, 3)?);
        match out.last_mut() {
            Some(f) if f.stamp == stamp => f.obs.push((id, px)),
            _ => out.push(FrameObs {
                stamp,
                obs: vec![(id, px)],
            }),
        }
    }
    Ok(out)
}

const STATE_HEADER: [&str; 17] = [
    "stamp", "px", "py", "pz", "qw", "qx", "qy", "qz", "vx", "vy", "vz", "bax", "bay", "baz",
    "bwx", "bwy", "bwz",
];

/// Writes body states (used for both ground truth and estimates).
pub fn write_states_csv(path: &Path, states: &[BodyState]) -> Result<()> {
    let mut w = writer(path)?;
    w.write_record(STATE_HEADER)?;
    for s in states {
        w.write_record([
            s.stamp.to_string(),
            s.p.x.to_string(),
            s.p.y.to_string(),
            s.p.z.to_string(),
            s.q.w.to_string(),
            s.q.i.to_string(),
            s.q.j.to_string(),
            s.q.k.to_string(),
            s.v.x.to_string(),
            s.v.y.to_string(),
            s.v.z.to_string(),
            s.ba.x.to_string(),
            s.ba.y.to_string(),
            s.ba.z.to_string(),
            s.bw.x.to_string(),
            s.bw.y.to_string(),
            s.bw.z.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_states_csv(path: &Path) -> Result<Vec<BodyState>> {
    let mut out = Vec::new();
    for rec in reader(path)?.records() {
        let r = rec?;
        out.push(BodyState {
            stamp: field(&r, 0)?,
            p: Vector3::new(field(&r, 1)?, field(&r, 2)?, field(&r, 3)?),
            q: UnitQuaternion::from_quaternion(Quaternion::new(
                field(&r, 4)?,
                field(&r, 5)?,
                field(&r, 6)?,
                field(&r, 7)?,
            )),
            v: Vector3::new(field(&r, 8)?, field(&r, 9)?, field(&r, 10)?),
            ba: Vector3::new(field(&r, 11)?, field(&r, 12)?, field(&r, 13)?),
            bw: Vector3::new(field(&r, 14)?, field(&r, 15)?, field(&r, 16)?),
        });
    }
    Ok(out)
}

pub fn write_weights_csv(path: &Path, rows: &[WeightRow]) -> Result<()> {
    let mut w = writer(path)?;
    w.write_record(["stamp", "feature_id", "weight"])?;
    for r in rows {
        w.write_record([
            r.stamp.to_string(),
            r.feature_id.to_string(),
            r.weight.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_bias_csv(path: &Path, rows: &[BiasRow]) -> Result<()> {
    let mut w = writer(path)?;
    w.write_record(["stamp", "bax", "bay", "baz", "bwx", "bwy", "bwz"])?;
    for r in rows {
        w.write_record([
            r.stamp.to_string(),
            r.ba.x.to_string(),
            r.ba.y.to_string(),
            r.ba.z.to_string(),
            r.bw.x.to_string(),
            r.bw.y.to_string(),
            r.bw.z.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_bcc_csv(path: &Path, rows: &[BccRow]) -> Result<()> {
    let mut w = writer(path)?;
    w.write_record(["window", "n_a", "round"])?;
    for r in rows {
        w.write_record([
            r.window.to_string(),
            r.anomalous.to_string(),
            r.round.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_bcc_csv(path: &Path) -> Result<Vec<BccRow>> {
    let mut out = Vec::new();
    for rec in reader(path)?.records() {
        let r = rec?;
        out.push(BccRow {
            window: r.get(0).context("missing window")?.parse()?,
            anomalous: r.get(1).context("missing n_a")?.parse()?,
            round: r.get(2).context("missing round")?.parse()?,
        });
    }
    Ok(out)
}

/// One scored run of a method on a scenario seed. A NaN `ate_rmse` marks a
/// failed (diverged or unmeasurable) run.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub method: String,
    pub scenario: String,
    pub seed: u64,
    pub ate_rmse: f64,
    pub rte_rmse: f64,
    pub recovery_count: usize,
    pub mean_ba_ms: f64,
}

pub fn write_metrics_csv(path: &Path, rows: &[MetricsRow]) -> Result<()> {
    let mut w = writer(path)?;
    w.write_record([
        "method",
        "scenario",
        "seed",
        "ate_rmse",
        "rte_rmse",
        "recovery_count",
        "mean_ba_ms",
    ])?;
    for r in rows {
        w.write_record([
            r.method.clone(),
            r.scenario.clone(),
            r.seed.to_string(),
            r.ate_rmse.to_string(),
            r.rte_rmse.to_string(),
            r.recovery_count.to_string(),
            r.mean_ba_ms.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_metrics_csv(path: &Path) -> Result<Vec<MetricsRow>> {
    let mut out = Vec::new();
    for rec in reader(path)?.records() {
        let r = rec?;
        out.push(MetricsRow {
            method: r.get(0).context("missing method")?.to_string(),
            scenario: r.get(1).context("missing scenario")?.to_string(),
            seed: r.get(2).context("missing seed")?.parse()?,
            ate_rmse: field(&r, 3)?,
            rte_rmse: field(&r, 4)?,
            recovery_count: r.get(5).context("missing recovery_count")?.parse()?,
            mean_ba_ms: field(&r, 6)?,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use vio_core::{generate, preset};

    #[test]
    fn state_rows_round_trip() {
        let sc = preset("static_room").unwrap();
        let bundle = generate(&sc, 1);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("gt.csv");
        write_states_csv(&path, &bundle.gt[..50]).unwrap();
        let back = read_states_csv(&path).unwrap();
        assert_eq!(back.len(), 50);
        for (a, b) in bundle.gt[..50].iter().zip(&back) {
            assert_eq!(a.stamp, b.stamp);
            assert_eq!(a.p, b.p);
            assert_eq!(a.q, b.q);
            assert_eq!(a.v, b.v);
            assert_eq!(a.ba, b.ba);
            assert_eq!(a.bw, b.bw);
        }
    }

    #[test]
    fn imu_and_frames_round_trip() {
        let sc = preset("dynamic_mid").unwrap();
        let bundle = generate(&sc, 2);
        let dir = tempfile::tempdir().unwrap();
        let ip = dir.path().join("imu.csv");
        write_imu_csv(&ip, &bundle.imu[..200]).unwrap();
        assert_eq!(read_imu_csv(&ip).unwrap(), bundle.imu[..200]);
        let fp = dir.path().join("frames.csv");
        write_frames_csv(&fp, &bundle.frames[..20]).unwrap();
        assert_eq!(read_frames_csv(&fp).unwrap(), bundle.frames[..20]);
    }

    #[test]
    fn metrics_round_trip_preserves_nan_failures() {
        let rows = vec![
            MetricsRow {
                method: "plain_ls".into(),
                scenario: "lateral_abrupt".into(),
                seed: 7,
                ate_rmse: f64::NAN,
                rte_rmse: 0.125,
                recovery_count: 3,
                mean_ba_ms: 12.5,
            },
            MetricsRow {
                method: "atls".into(),
                scenario: "lateral_abrupt".into(),
                seed: 7,
                ate_rmse: 0.0125,
                rte_rmse: 0.01,
                recovery_count: 0,
                mean_ba_ms: 14.25,
            },
        ];
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("metrics.csv");
        write_metrics_csv(&path, &rows).unwrap();
        let back = read_metrics_csv(&path).unwrap();
        assert_eq!(back.len(), 2);
        assert!(back[0].ate_rmse.is_nan());
        assert_eq!(back[1], rows[1]);
    }
}
