//! Artifact writers: fixed-format CSV, pretty JSON and the run manifest.

use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use gbsvie_core::{IntervalPlan, ProblemFile, ProblemSpec, SolutionBundle};
use serde::Serialize;
use sha2::{Digest, Sha256};

/// Lower-case hexadecimal SHA-256 of `bytes`.
pub fn sha256_hex(bytes: &[u8]) -> String {
    hex(&Sha256::digest(bytes))
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Renders a float with 17 significant digits.
pub fn num(v: f64) -> String {
    format!("{v:.16e}")
}

/// Writer that hashes and counts everything passing through it.
struct HashingWriter {
    inner: BufWriter<File>,
    hasher: Sha256,
    bytes: u64,
}

impl Write for HashingWriter {
    fn write(&mut self, buf: &[u8]) -> io::Result<usize> {
        let n = self.inner.write(buf)?;
        self.hasher.update(&buf[..n]);
        self.bytes += n as u64;
        Ok(n)
    }

    fn flush(&mut self) -> io::Result<()> {
        self.inner.flush()
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct OutputFile {
    pub name: String,
    pub bytes: u64,
    pub sha256: String,
}

/// Output directory that records every file written into it.
pub struct OutDir {
    root: PathBuf,
    files: Vec<OutputFile>,
}

impl OutDir {
    pub fn create(root: &Path) -> Result<Self> {
        std::fs::create_dir_all(root).with_context(|| format!("creating output directory {}", root.display()))?;
        Ok(OutDir {
            root: root.to_path_buf(),
            files: Vec::new(),
        })
    }

    /// Streams a file through `body` and records its size and hash.
    pub fn write_with(&mut self, name: &str, body: impl FnOnce(&mut dyn Write) -> io::Result<()>) -> Result<()> {
        let path = self.root.join(name);
        let file = File::create(&path).with_context(|| format!("creating {}", path.display()))?;
        let mut w = HashingWriter {
            inner: BufWriter::new(file),
            hasher: Sha256::new(),
            bytes: 0,
        };
        body(&mut w)
            .and_then(|_| w.flush())
            .with_context(|| format!("writing {}", path.display()))?;
        self.files.push(OutputFile {
            name: name.to_string(),
            bytes: w.bytes,
            sha256: hex(&w.hasher.finalize()),
        });
        Ok(())
    }

    pub fn write_json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<()> {
        let mut text = serde_json::to_string_pretty(value)?;
        text.push('\n');
        self.write_with(name, |w| w.write_all(text.as_bytes()))
    }

    /// Writes the manifest last; it lists every file written before it.
    pub fn finish(self, mut manifest: Manifest) -> Result<()> {
        manifest.outputs = self.files;
        let mut text = serde_json::to_string_pretty(&manifest)?;
        text.push('\n');
        let path = self.root.join("manifest.json");
        std::fs::write(&path, text).with_context(|| format!("writing {}", path.display()))
    }
}

/// `t,x,y` over every time node and space node.
pub fn write_y_surface(w: &mut dyn Write, spec: &ProblemSpec, bundle: &SolutionBundle) -> io::Result<()> {
    writeln!(w, "t,x,y")?;
    for i in 0..=spec.n_t() {
        let t = num(spec.tgrid.time(i));
        for (j, y) in bundle.y.row(i).iter().enumerate() {
            writeln!(w, "{t},{},{}", num(spec.xgrid.x(j)), num(*y))?;
        }
    }
    Ok(())
}

/// `t,s,x,z` over the triangle `s >= t`, for anchors that are multiples of `stride`.
pub fn write_z_field(w: &mut dyn Write, spec: &ProblemSpec, bundle: &SolutionBundle, stride: usize) -> io::Result<()> {
    writeln!(w, "t,s,x,z")?;
    write_triangle(w, spec, stride, |i, k| {
        bundle.z.row(i, k).expect("k >= i").iter().map(|z| num(*z)).collect()
    })
}

/// `t,s,x,sigma`: the band end attaining the supremum in `G` at each node.
pub fn write_sig_star(w: &mut dyn Write, spec: &ProblemSpec, bundle: &SolutionBundle, stride: usize) -> io::Result<()> {
    writeln!(w, "t,s,x,sigma")?;
    write_triangle(w, spec, stride, |i, k| {
        bundle
            .sig_star
            .row(i, k)
            .expect("k >= i")
            .iter()
            .map(|r| num(r.sigma(&spec.band)))
            .collect()
    })
}

fn write_triangle(
    w: &mut dyn Write,
    spec: &ProblemSpec,
    stride: usize,
    row: impl Fn(usize, usize) -> Vec<String>,
) -> io::Result<()> {
    let xs: Vec<String> = spec.xgrid.nodes().into_iter().map(num).collect();
    for i in (0..=spec.n_t()).step_by(stride.max(1)) {
        let t = num(spec.tgrid.time(i));
        for k in i..=spec.n_t() {
            let s = num(spec.tgrid.time(k));
            for (x, v) in xs.iter().zip(row(i, k)) {
                writeln!(w, "{t},{s},{x},{v}")?;
            }
        }
    }
    Ok(())
}

/// `t,path,k`: pathwise `K(t, T)` samples.
pub fn write_k_samples(w: &mut dyn Write, spec: &ProblemSpec, bundle: &SolutionBundle) -> io::Result<()> {
    writeln!(w, "t,path,k")?;
    for s in &bundle.k_samples {
        writeln!(w, "{},{},{}", num(spec.tgrid.time(s.t_index)), s.path, num(s.value))?;
    }
    Ok(())
}

#[derive(Debug, Clone, Serialize)]
pub struct GridSummary {
    #[serde(rename = "T")]
    pub horizon: f64,
    pub n_t: usize,
    pub n_x: usize,
    pub x_min: f64,
    pub x_max: f64,
    pub dt: f64,
    pub dx: f64,
    pub substeps: usize,
    pub effective_cfl: f64,
}

impl GridSummary {
    pub fn of(spec: &ProblemSpec) -> Self {
        GridSummary {
            horizon: spec.tgrid.horizon(),
            n_t: spec.n_t(),
            n_x: spec.n_x(),
            x_min: spec.xgrid.x_min(),
            x_max: spec.xgrid.x_max(),
            dt: spec.dt(),
            dx: spec.dx(),
            substeps: spec.substeps,
            effective_cfl: spec.effective_cfl(),
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct PlanEntry {
    pub t_lo: f64,
    pub t_hi: f64,
    pub delta: f64,
    pub sweeps: usize,
    pub restarts: usize,
}

pub fn plan_entries(spec: &ProblemSpec, plan: &IntervalPlan) -> Vec<PlanEntry> {
    plan.intervals
        .iter()
        .map(|l| PlanEntry {
            t_lo: spec.tgrid.time(l.interval.lo),
            t_hi: spec.tgrid.time(l.interval.hi),
            delta: l.delta,
            sweeps: l.residuals.len(),
            restarts: l.restarts,
        })
        .collect()
}

#[derive(Debug, Clone, Serialize)]
pub struct InputEntry {
    pub path: String,
    pub sha256: String,
    /// The problem with every default written out.
    pub resolved: ProblemFile,
    pub grid: GridSummary,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub plan: Option<Vec<PlanEntry>>,
}

impl InputEntry {
    pub fn new(path: &Path, bytes: &[u8], spec: &ProblemSpec) -> Self {
        InputEntry {
            path: path.display().to_string(),
            sha256: sha256_hex(bytes),
            resolved: ProblemFile::from_spec(spec),
            grid: GridSummary::of(spec),
            plan: None,
        }
    }
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct Seeds {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub paths: Option<u64>,
    pub probes: Vec<u64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct Manifest {
    pub tool: &'static str,
    pub version: &'static str,
    pub core_version: &'static str,
    pub command: String,
    pub args: Vec<String>,
    pub inputs: Vec<InputEntry>,
    pub seeds: Seeds,
    pub threads: usize,
    pub wall_clock_seconds: f64,
    pub outputs: Vec<OutputFile>,
}

impl Manifest {
    pub fn new(command: &str, inputs: Vec<InputEntry>, seeds: Seeds, wall_clock_seconds: f64) -> Self {
        Manifest {
            tool: "gbsvie",
            version: env!("CARGO_PKG_VERSION"),
            core_version: gbsvie_core::VERSION,
            command: command.to_string(),
            args: std::env::args().skip(1).collect(),
            inputs,
            seeds,
            threads: rayon::current_num_threads(),
            wall_clock_seconds,
            outputs: Vec::new(),
        }
    }
}
