//! File formats: XYZ trajectories, sweep and metrics CSV, model checkpoints.
//!
//! Checkpoint layout: one line of JSON (see [`CheckpointHeader`]) terminated
//! by `\n`, followed by the parameters as little-endian `f64` in
//! `w1, b1, w2, b2` order, matrices row-major.

use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diffusion::{rms_scale, MlpDenoiser, StepMetrics, TrainConfig};
use crate::error::{Error, Result};
use crate::estimators::SweepRecord;
use crate::geom::{PointCloud, Vec3};

/// A sequence of same-size frames, each centered.
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub frames: Vec<PointCloud>,
    pub name: String,
    /// RMS point norm of frame 0.
    pub scale: f64,
}

impl Trajectory {
    pub fn new(frames: Vec<PointCloud>, name: impl Into<String>) -> Result<Self> {
        let Some(first) = frames.first() else {
            return Err(Error::Format("trajectory has no frames".into()));
        };
        let n = first.len();
        if let Some((k, f)) = frames.iter().enumerate().find(|(_, f)| f.len() != n) {
            return Err(Error::Format(format!("frame {k} has {} points, frame 0 has {n}", f.len())));
        }
        let frames: Vec<PointCloud> = frames.iter().map(PointCloud::center).collect();
        let scale = rms_scale(&frames[0]);
        Ok(Self {
            frames,
            name: name.into(),
            scale,
        })
    }

    pub fn n_points(&self) -> usize {
        self.frames[0].len()
    }

    pub fn frame(&self, i: usize) -> Result<&PointCloud> {
        self.frames
            .get(i)
            .ok_or_else(|| Error::InvalidParameter(format!("frame {i} out of range (have {})", self.frames.len())))
    }
}

/// Parses concatenated XYZ frames: a count line, a comment line, then one
/// `LABEL x y z` line per point. The first comment becomes the name.
pub fn parse_xyz(text: &str) -> Result<Trajectory> {
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l)).peekable();
    let mut frames = Vec::new();
    let mut name = String::new();
    loop {
        while lines.peek().is_some_and(|(_, l)| l.trim().is_empty()) {
            lines.next();
        }
        let Some((ln, count_line)) = lines.next() else { break };
        let n: usize = count_line.trim().parse().map_err(|_| Error::Parse {
            line: ln,
            message: format!("expected point count, found {:?}", count_line.trim()),
        })?;
        if n == 0 {
            return Err(Error::Parse {
                line: ln,
                message: "frame has zero points".into(),
            });
        }
        let (_, comment) = lines.next().ok_or(Error::Parse {
            line: ln + 1,
            message: "missing comment line".into(),
        })?;
        if frames.is_empty() {
            name = comment.trim().to_string();
        }
        let mut points = Vec::with_capacity(n);
        for k in 0..n {
            let (ln, line) = lines.next().ok_or(Error::Parse {
                line: ln + 2 + k,
                message: format!("expected {n} points, file ended after {k}"),
            })?;
            points.push(parse_point(ln, line)?);
        }
        frames.push(PointCloud::new(points).map_err(|e| Error::Parse {
            line: ln,
            message: e.to_string(),
        })?);
    }
    Trajectory::new(frames, name)
}

fn parse_point(ln: usize, line: &str) -> Result<Vec3> {
    let fields: Vec<&str> = line.split_whitespace().collect();
    if fields.len() != 4 {
        return Err(Error::Parse {
            line: ln,
            message: format!("expected `LABEL x y z`, found {} fields", fields.len()),
        });
    }
    let mut c = [0.0; 3];
    for (slot, field) in c.iter_mut().zip(&fields[1..]) {
        *slot = field.parse().map_err(|_| Error::Parse {
            line: ln,
            message: format!("bad coordinate {field:?}"),
        })?;
    }
    Ok(Vec3::new(c[0], c[1], c[2]))
}

pub fn load_trajectory(path: impl AsRef<Path>) -> Result<Trajectory> {
    parse_xyz(&fs::read_to_string(path)?)
}

/// Writes every frame with label `X`. Coordinates use shortest round-trip
/// formatting, so a reload is exact.
pub fn write_xyz<W: Write>(mut w: W, frames: &[PointCloud], comment: &str) -> Result<()> {
    let comment = comment.replace('\n', " ");
    for f in frames {
        writeln!(w, "{}", f.len())?;
        writeln!(w, "{comment}")?;
        for p in f.points() {
            writeln!(w, "X {} {} {}", p.x, p.y, p.z)?;
        }
    }
    Ok(())
}

pub fn save_trajectory(path: impl AsRef<Path>, traj: &Trajectory) -> Result<()> {
    let mut buf = Vec::new();
    write_xyz(&mut buf, &traj.frames, &traj.name)?;
    fs::write(path, buf)?;
    Ok(())
}

/// Frame 0 is a unit-RMS centered Gaussian cloud; frame `k` adds `jitter`
/// times fresh Gaussian noise to it and re-centers.
pub fn synth_trajectory(n_points: usize, n_frames: usize, jitter: f64, seed: u64) -> Result<Trajectory> {
    if n_points < 4 {
        return Err(Error::TooFewPoints { min: 4, got: n_points });
    }
    if n_frames == 0 || !(jitter >= 0.0 && jitter.is_finite()) {
        return Err(Error::InvalidParameter("need n_frames ≥ 1 and finite jitter ≥ 0".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let base = PointCloud::standard_normal(n_points, &mut rng).center();
    let base = base.scale(1.0 / rms_scale(&base));
    let mut frames = vec![base.clone()];
    for _ in 1..n_frames {
        let noise = PointCloud::standard_normal(n_points, &mut rng);
        frames.push(if jitter == 0.0 {
            base.clone()
        } else {
            base.add_scaled(&noise, jitter)?.center()
        });
    }
    Trajectory::new(frames, format!("synthetic n={n_points} seed={seed}"))
}

fn write_csv<W: Write, T: Serialize>(w: W, rows: &[T]) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    for r in rows {
        wtr.serialize(r)?;
    }
    wtr.flush()?;
    Ok(())
}

fn read_csv<R: Read, T: for<'de> Deserialize<'de>>(r: R) -> Result<Vec<T>> {
    csv::Reader::from_reader(r)
        .deserialize()
        .collect::<std::result::Result<Vec<T>, _>>()
        .map_err(Error::from)
}

/// Header `sigma,kind,mean_mse,stderr,n_samples,n_excluded,seed`.
pub fn write_sweep_csv<W: Write>(w: W, records: &[SweepRecord]) -> Result<()> {
    if records.is_empty() {
        let mut w = w;
        writeln!(w, "sigma,kind,mean_mse,stderr,n_samples,n_excluded,seed")?;
        return Ok(());
    }
    write_csv(w, records)
}

pub fn read_sweep_csv<R: Read>(r: R) -> Result<Vec<SweepRecord>> {
    read_csv(r)
}

/// Header `step,loss,rmsd,aligned_rmsd,n_excluded`.
pub fn write_metrics_csv<W: Write>(w: W, metrics: &[StepMetrics]) -> Result<()> {
    if metrics.is_empty() {
        let mut w = w;
        writeln!(w, "step,loss,rmsd,aligned_rmsd,n_excluded")?;
        return Ok(());
    }
    write_csv(w, metrics)
}

pub fn read_metrics_csv<R: Read>(r: R) -> Result<Vec<StepMetrics>> {
    read_csv(r)
}

const CHECKPOINT_FORMAT: &str = "so3-denoise-mlp";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format: String,
    pub version: u32,
    pub n_points: usize,
    pub hidden: usize,
    pub s_ref: f64,
    pub n_params: usize,
    pub seed: Option<u64>,
    pub config: Option<TrainConfig>,
}

pub fn write_checkpoint<W: Write>(mut w: W, model: &MlpDenoiser, config: Option<&TrainConfig>) -> Result<()> {
    let header = CheckpointHeader {
        format: CHECKPOINT_FORMAT.into(),
        version: CHECKPOINT_VERSION,
        n_points: model.n_points(),
        hidden: model.hidden(),
        s_ref: model.s_ref,
        n_params: model.n_params(),
        seed: config.map(|c| c.seed),
        config: config.cloned(),
    };
    serde_json::to_writer(&mut w, &header)?;
    w.write_all(b"\n")?;
    for v in model.params_flat() {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub fn read_checkpoint<R: Read>(r: R) -> Result<(MlpDenoiser, CheckpointHeader)> {
    let mut r = BufReader::new(r);
    let mut line = Vec::new();
    r.read_until(b'\n', &mut line)?;
    let header: CheckpointHeader = serde_json::from_slice(&line)?;
    if header.format != CHECKPOINT_FORMAT || header.version != CHECKPOINT_VERSION {
        return Err(Error::Format(format!(
            "unsupported checkpoint {} v{}",
            header.format, header.version
        )));
    }
    let mut model = MlpDenoiser::zeros(header.n_points, header.hidden, header.s_ref);
    if model.n_params() != header.n_params {
        return Err(Error::Format("parameter count does not match dimensions".into()));
    }
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    if bytes.len() != 8 * header.n_params {
        return Err(Error::Format(format!(
            "expected {} parameter bytes, found {}",
            8 * header.n_params,
            bytes.len()
        )));
    }
    let params: Vec<f64> = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect();
    model.set_params_flat(&params)?;
    if !model.is_finite() {
        return Err(Error::NonFinite("checkpoint parameters"));
    }
    Ok((model, header))
}

pub fn save_checkpoint(path: impl AsRef<Path>, model: &MlpDenoiser, config: Option<&TrainConfig>) -> Result<()> {
    let mut buf = Vec::new();
    write_checkpoint(&mut buf, model, config)?;
    fs::write(path, buf)?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<(MlpDenoiser, CheckpointHeader)> {
    read_checkpoint(fs::File::open(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::estimators::EstimatorKind;

    #[test]
    fn two_point_example() {
        let t = parse_xyz("2\nt\nA 1 0 0\nA -1 0 0\n").unwrap();
        assert_eq!(t.n_points(), 2);
        assert_eq!(t.frames.len(), 1);
        assert_eq!(t.scale, 1.0);
        assert_eq!(t.name, "t");
    }

    #[test]
    fn frames_are_centered() {
        let t = parse_xyz("2\n\nA 2 0 0\nA 4 0 0\n2\n\nB 0 1 1\nB 0 3 1\n").unwrap();
        assert_eq!(t.frames.len(), 2);
        assert!(t.frames.iter().all(|f| f.is_centered(1e-15)));
        assert_eq!(t.scale, 1.0);
    }

    #[test]
    fn parse_errors_carry_line_numbers() {
        assert!(parse_xyz("").is_err());
        assert!(matches!(parse_xyz("x\n"), Err(Error::Parse { line: 1, .. })));
        assert!(matches!(parse_xyz("2\nc\nA 1 0 0\nA 1 zero 0\n"), Err(Error::Parse { line: 4, .. })));
        assert!(matches!(parse_xyz("2\nc\nA 1 0 0\n"), Err(Error::Parse { line: 4, .. })));
        assert!(matches!(parse_xyz("1\nc\nA 1 0\n"), Err(Error::Parse { line: 3, .. })));
        assert!(matches!(parse_xyz("1\nc\nA 1 0 nan\n"), Err(Error::Parse { line: 1, .. })));
        assert!(matches!(
            parse_xyz("1\nc\nA 1 0 0\n2\nc\nA 1 0 0\nA 0 0 0\n"),
            Err(Error::Format(_))
        ));
    }

    #[test]
    fn xyz_round_trip_is_exact() {
        let t = synth_trajectory(7, 3, 0.1, 4).unwrap();
        let mut buf = Vec::new();
        write_xyz(&mut buf, &t.frames, &t.name).unwrap();
        let back = parse_xyz(std::str::from_utf8(&buf).unwrap()).unwrap();
        for (a, b) in back.frames.iter().zip(&t.frames) {
            // reload re-centers, which may move the last bit
            assert!(a.dist_sq(b).unwrap() < 1e-28);
        }
        assert_eq!(back.name, t.name);
    }

    #[test]
    fn synth_examples() {
        let t = synth_trajectory(8, 4, 0.0, 1).unwrap();
        assert!(t.frames.iter().all(|f| f == &t.frames[0]));
        assert!((t.scale - 1.0).abs() < 1e-12);
        assert_eq!(synth_trajectory(8, 4, 0.2, 9).unwrap(), synth_trajectory(8, 4, 0.2, 9).unwrap());
        assert_ne!(synth_trajectory(8, 2, 0.2, 9).unwrap().frames[1], t.frames[1]);
        assert!(synth_trajectory(3, 1, 0.0, 0).is_err());
    }

    #[test]
    fn sweep_csv_round_trip() {
        let rows = vec![
            SweepRecord {
                sigma: 0.1,
                kind: EstimatorKind::Order2,
                mean_mse: 1.234_567_890_123_456_7e-9,
                stderr: 3.3e-10,
                n_samples: 63,
                n_excluded: 1,
                seed: 42,
            },
            SweepRecord {
                sigma: 0.2,
                kind: EstimatorKind::Aug,
                mean_mse: f64::NAN,
                stderr: f64::NAN,
                n_samples: 0,
                n_excluded: 64,
                seed: 42,
            },
        ];
        let mut buf = Vec::new();
        write_sweep_csv(&mut buf, &rows).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("sigma,kind,mean_mse,stderr,n_samples,n_excluded,seed\n"));
        assert!(text.contains(",order2,"));
        let back = read_sweep_csv(&buf[..]).unwrap();
        assert_eq!(back[0], rows[0]);
        assert!(back[1].mean_mse.is_nan() && back[1].kind == EstimatorKind::Aug);
    }

    #[test]
    fn metrics_csv_round_trip() {
        let rows: Vec<StepMetrics> = (0..3)
            .map(|i| StepMetrics {
                step: i,
                loss: 1.0 / (i as f64 + 3.0),
                rmsd: 0.1 * i as f64,
                aligned_rmsd: 0.7,
                n_excluded: i,
            })
            .collect();
        let mut buf = Vec::new();
        write_metrics_csv(&mut buf, &rows).unwrap();
        assert!(buf.starts_with(b"step,loss,rmsd,aligned_rmsd,n_excluded\n"));
        assert_eq!(read_metrics_csv(&buf[..]).unwrap(), rows);
    }

    #[test]
    fn checkpoint_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let m = MlpDenoiser::init(5, 6, 1.25, &mut rng);
        let cfg = TrainConfig {
            seed: 17,
            ..TrainConfig::default()
        };
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, &m, Some(&cfg)).unwrap();
        let (back, header) = read_checkpoint(&buf[..]).unwrap();
        assert_eq!(back, m);
        assert_eq!(header.seed, Some(17));
        assert_eq!(header.config, Some(cfg));

        let truncated = &buf[..buf.len() - 8];
        assert!(matches!(read_checkpoint(truncated), Err(Error::Format(_))));
        assert!(read_checkpoint(&b"not json\n"[..]).is_err());
    }
}
