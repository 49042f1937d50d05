//! Command-line front end: quantize, render, psnr, verify-rmcm, stats.
//!
//! Exit codes: 0 ok, 2 bad arguments, 3 malformed model, 4 verification
//! failure, 5 I/O.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use clap::{Parser, Subcommand, ValueEnum};
use serde_json::json;

use crate::model_io::{self, AnyModel, Calibration, FloatModel, ImageFormat, ModelIoError, QuantizedModel};
use crate::plcore::{estimate_traffic, truncate2, GIB, MIB};
use crate::renderer::{self, Camera, Pipeline, RenderError, RenderSettings};
use crate::rmcm::{self, MulMode};

pub const EXIT_OK: i32 = 0;
pub const EXIT_ARGS: i32 = 2;
pub const EXIT_MODEL: i32 = 3;
pub const EXIT_VERIFY: i32 = 4;
pub const EXIT_IO: i32 = 5;

#[derive(Debug, Parser)]
#[command(name = "plenoptic", version, about = "Fixed-point neural rendering core simulator")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    Exact,
    Approx,
    FloatOracle,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Quantize a float model container.
    Quantize {
        input: PathBuf,
        output: PathBuf,
        /// Poses whose rays provide calibration samples.
        #[arg(long)]
        calibration: Option<PathBuf>,
        /// Calibration image size (square).
        #[arg(long, default_value_t = 16)]
        calibration_size: u32,
        #[arg(long, default_value_t = 16)]
        calibration_samples: usize,
        #[arg(long, default_value_t = 2.0)]
        near: f64,
        #[arg(long, default_value_t = 6.0)]
        far: f64,
        #[arg(long)]
        json: bool,
    },
    /// Render one frame.
    Render {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        coarse_model: Option<PathBuf>,
        /// Transforms file; a camera on +z looking at the origin if absent.
        #[arg(long)]
        poses: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        frame: usize,
        #[arg(long, default_value_t = 64)]
        width: u32,
        #[arg(long, default_value_t = 64)]
        height: u32,
        #[arg(long, default_value_t = 2.0)]
        near: f64,
        #[arg(long, default_value_t = 6.0)]
        far: f64,
        #[arg(long, default_value_t = 64)]
        coarse: usize,
        /// Importance samples per ray; 0 renders the coarse pass only.
        #[arg(long, default_value_t = 128)]
        fine: usize,
        #[arg(long, value_enum, default_value_t = ModeArg::Exact)]
        mode: ModeArg,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1)]
        workers: usize,
        /// Place samples at stratum midpoints.
        #[arg(long)]
        no_jitter: bool,
        /// Output image (.ppm or .png).
        #[arg(long)]
        out: PathBuf,
        /// Reference image for a PSNR figure in the report.
        #[arg(long)]
        reference: Option<PathBuf>,
        #[arg(long)]
        json: bool,
    },
    /// PSNR between two images.
    Psnr {
        a: PathBuf,
        b: PathBuf,
        #[arg(long)]
        json: bool,
    },
    /// Exhaustive check of the constant multipliers.
    VerifyRmcm {
        #[arg(long)]
        json: bool,
    },
    /// Off-chip data volume for a frame.
    Stats {
        width: u64,
        height: u64,
        samples: u64,
        /// Samples per ray leaving the MLP when volume rendering is off-chip.
        #[arg(long, default_value_t = 128)]
        fine: u64,
        #[arg(long)]
        json: bool,
    },
}

#[derive(Debug)]
pub enum CliError {
    Args(String),
    Model(String),
    Verify(String),
    Io(String),
}

impl CliError {
    pub fn code(&self) -> i32 {
        match self {
            CliError::Args(_) => EXIT_ARGS,
            CliError::Model(_) => EXIT_MODEL,
            CliError::Verify(_) => EXIT_VERIFY,
            CliError::Io(_) => EXIT_IO,
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Args(m) | CliError::Model(m) | CliError::Verify(m) | CliError::Io(m) => m,
        }
    }
}

fn model_err(path: &Path, e: ModelIoError) -> CliError {
    let msg = format!("{}: {e}", path.display());
    match e {
        ModelIoError::Io(_) => CliError::Io(msg),
        _ => CliError::Model(msg),
    }
}

fn io_err(path: &Path, e: ModelIoError) -> CliError {
    let msg = format!("{}: {e}", path.display());
    match e {
        ModelIoError::Io(_) | ModelIoError::Image(_) => CliError::Io(msg),
        _ => CliError::Args(msg),
    }
}

fn render_err(e: RenderError) -> CliError {
    match e {
        RenderError::Core(e) => CliError::Model(e.to_string()),
        e => CliError::Args(e.to_string()),
    }
}

/// Parses `args` (including the program name) and runs the command,
/// writing reports to `out` and diagnostics to stderr.
pub fn run<I, T>(args: I, out: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_ARGS } else { EXIT_OK };
        }
    };
    match execute(cli.command, out) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {}", e.message());
            e.code()
        }
    }
}

pub fn execute(cmd: Command, out: &mut dyn Write) -> Result<(), CliError> {
    match cmd {
        Command::Quantize {
            input,
            output,
            calibration,
            calibration_size,
            calibration_samples,
            near,
            far,
            json,
        } => {
            let float = model_io::load_float(&input).map_err(|e| model_err(&input, e))?;
            let cal_cams = match &calibration {
                Some(p) => {
                    if calibration_size == 0 || calibration_samples == 0 {
                        return Err(CliError::Args("calibration size and samples must be positive".into()));
                    }
                    Some(
                        model_io::load_poses(p, calibration_size, calibration_size, near, far)
                            .map_err(|e| io_err(p, e))?,
                    )
                }
                None => None,
            };
            let cal = cal_cams
                .as_ref()
                .map(|cams| calibrate(&float, cams, calibration_samples));
            let q = model_io::quantize_model(&float, cal.as_ref()).map_err(|e| model_err(&input, e))?;
            let saturations = match &cal_cams {
                Some(cams) => Some(calibration_saturations(&q, cams, calibration_samples)?),
                None => None,
            };
            model_io::save_quantized(&q, &output).map_err(|e| model_err(&output, e))?;
            let params = q.quant_params();
            if json {
                let report = json!({
                    "output": output,
                    "params": params,
                    "calibration_saturations": saturations,
                });
                writeln!(out, "{report}").map_err(write_err)?;
            } else {
                let mut s = format!(
                    "position {}  direction {}\n",
                    params.position_frac, params.direction_frac
                );
                s += "layer   in      w_frac  out\n";
                let rows = params
                    .layers
                    .iter()
                    .enumerate()
                    .map(|(i, l)| (i.to_string(), l))
                    .chain([
                        ("density".to_string(), &params.density),
                        ("color".to_string(), &params.color),
                    ]);
                for (name, l) in rows {
                    s += &format!("{name:<8}{:<8}{:<8}{}\n", l.in_frac.to_string(), l.w_frac, l.out_frac);
                }
                if let Some(n) = saturations {
                    s += &format!("calibration saturations: {n}\n");
                }
                s += &format!("wrote {}\n", output.display());
                out.write_all(s.as_bytes()).map_err(write_err)?;
            }
            Ok(())
        }
        Command::Render {
            model,
            coarse_model,
            poses,
            frame,
            width,
            height,
            near,
            far,
            coarse,
            fine,
            mode,
            seed,
            workers,
            no_jitter,
            out: out_path,
            reference,
            json,
        } => {
            if width == 0 || height == 0 || coarse == 0 || workers == 0 {
                return Err(CliError::Args(
                    "width, height, coarse and workers must be positive".into(),
                ));
            }
            let cam = match &poses {
                Some(p) => {
                    let cams = model_io::load_poses(p, width, height, near, far).map_err(|e| io_err(p, e))?;
                    let n = cams.len();
                    cams.into_iter()
                        .nth(frame)
                        .ok_or_else(|| CliError::Args(format!("frame {frame} out of range ({n} frames)")))?
                }
                None => Camera::look_at([0.0, 0.0, 4.0], [0.0; 3], 0.6911, width, height, near, far),
            };
            let pipeline = build_pipeline(&model, coarse_model.as_deref(), mode)?;
            let settings = RenderSettings {
                coarse_samples: coarse,
                fine_samples: fine,
                seed,
                workers,
                jitter: !no_jitter,
            };
            let t0 = Instant::now();
            let r = renderer::render(&pipeline, &cam, &settings).map_err(render_err)?;
            let seconds = t0.elapsed().as_secs_f64();
            model_io::write_image(&r.image, &out_path, ImageFormat::from_path(&out_path))
                .map_err(|e| io_err(&out_path, e))?;
            let psnr = match &reference {
                Some(p) => {
                    let img = model_io::read_image(p).map_err(|e| io_err(p, e))?;
                    Some(renderer::psnr(&r.image, &img).map_err(render_err)?)
                }
                None => None,
            };
            if json {
                let report = json!({
                    "mode": format!("{mode:?}").to_lowercase(),
                    "width": width,
                    "height": height,
                    "seed": seed,
                    "workers": workers,
                    "seconds": seconds,
                    "counters": r.counters,
                    "psnr": psnr,
                    "output": out_path,
                });
                writeln!(out, "{report}").map_err(write_err)?;
            } else {
                let c = &r.counters;
                writeln!(
                    out,
                    "rendered {width}x{height} in {seconds:.2} s: {} samples, {} weight tile loads, {} B in, {} B out",
                    c.samples, c.weight_tile_loads, c.dram_bytes_in, c.dram_bytes_out
                )
                .map_err(write_err)?;
                if let Some(p) = psnr {
                    writeln!(out, "psnr {p:.2} dB").map_err(write_err)?;
                }
            }
            Ok(())
        }
        Command::Psnr { a, b, json } => {
            let ia = model_io::read_image(&a).map_err(|e| io_err(&a, e))?;
            let ib = model_io::read_image(&b).map_err(|e| io_err(&b, e))?;
            let p = renderer::psnr(&ia, &ib).map_err(render_err)?;
            if json {
                writeln!(out, "{}", json!({ "psnr": p })).map_err(write_err)?;
            } else {
                writeln!(out, "{p:.2}").map_err(write_err)?;
            }
            Ok(())
        }
        Command::VerifyRmcm { json } => {
            let r = rmcm::exhaustive_sweep();
            let (n, d) = r.approx_max_rel_err;
            if json {
                let report = json!({
                    "cases": r.cases,
                    "exact_matches": r.exact_matches,
                    "approx_max_rel_err": [n, d],
                    "approx_argmax": [r.approx_argmax.0, r.approx_argmax.1],
                    "bound_violations": r.bound_violations,
                    "passed": r.passed(),
                });
                writeln!(out, "{report}").map_err(write_err)?;
            } else {
                let status = if r.exact_matches == r.cases { "OK" } else { "FAIL" };
                writeln!(
                    out,
                    "exact: {}/{} {status}; approx max rel err = {n}/{d}",
                    thousands(r.exact_matches),
                    thousands(r.cases)
                )
                .map_err(write_err)?;
            }
            if r.passed() {
                Ok(())
            } else {
                Err(CliError::Verify("multiplier verification failed".into()))
            }
        }
        Command::Stats {
            width,
            height,
            samples,
            fine,
            json,
        } => {
            if width == 0 || height == 0 || samples == 0 || fine == 0 {
                return Err(CliError::Args(
                    "width, height and sample counts must be positive".into(),
                ));
            }
            let pe_off = estimate_traffic(width, height, samples, false, true).input_bytes;
            let pe_on = estimate_traffic(width, height, samples, true, true).input_bytes;
            let vru_off = estimate_traffic(width, height, fine, true, false).output_bytes;
            let vru_on = estimate_traffic(width, height, fine, true, true).output_bytes;
            let ratio = 100.0 * vru_on as f64 / vru_off as f64;
            if json {
                let report = json!({
                    "input_bytes_pe_off_chip": pe_off,
                    "input_bytes_pe_on_chip": pe_on,
                    "output_bytes_vru_off_chip": vru_off,
                    "output_bytes_vru_on_chip": vru_on,
                    "output_ratio_percent": ratio,
                });
                writeln!(out, "{report}").map_err(write_err)?;
            } else {
                let rows = [
                    (format!("input, encoding on host ({samples} samples)"), pe_off),
                    (format!("input, encoding on core ({samples} samples)"), pe_on),
                    (format!("output, rendering on host ({fine} samples)"), vru_off),
                    ("output, rendering on core".to_string(), vru_on),
                ];
                let mut s = String::new();
                for (label, bytes) in rows {
                    s += &format!("{label:<44}{:>16} B  {}\n", thousands(bytes), human(bytes));
                }
                s += &format!("output ratio {ratio:.3}%\n");
                out.write_all(s.as_bytes()).map_err(write_err)?;
            }
            Ok(())
        }
    }
}

fn write_err(e: std::io::Error) -> CliError {
    CliError::Io(e.to_string())
}

fn load_any(path: &Path) -> Result<AnyModel, CliError> {
    model_io::load(path).map_err(|e| model_err(path, e))
}

fn as_quantized(path: &Path) -> Result<Arc<QuantizedModel>, CliError> {
    Ok(Arc::new(match load_any(path)? {
        AnyModel::Quantized(q) => q,
        AnyModel::Float(f) => model_io::quantize_model(&f, None).map_err(|e| model_err(path, e))?,
    }))
}

fn build_pipeline(model: &Path, coarse: Option<&Path>, mode: ModeArg) -> Result<Pipeline, CliError> {
    let mul = match mode {
        ModeArg::Exact => MulMode::Exact,
        ModeArg::Approx => MulMode::Approx,
        ModeArg::FloatOracle => {
            let float = |p: &Path| match load_any(p)? {
                AnyModel::Float(f) => Ok(Arc::new(f)),
                AnyModel::Quantized(_) => Err(CliError::Args(format!(
                    "{}: float-oracle mode needs a float model",
                    p.display()
                ))),
            };
            let mut p = Pipeline::float(float(model)?);
            if let (Pipeline::Float { coarse: c, .. }, Some(path)) = (&mut p, coarse) {
                *c = Some(float(path)?);
            }
            return Ok(p);
        }
    };
    let mut p = Pipeline::fixed(as_quantized(model)?, mul);
    if let (Pipeline::Fixed { coarse: c, .. }, Some(path)) = (&mut p, coarse) {
        *c = Some(as_quantized(path)?);
    }
    Ok(p)
}

/// Calibration points: stratum midpoints along every pixel ray.
fn calibration_points(cams: &[Camera], samples: usize) -> Vec<([f64; 3], [f64; 3])> {
    let mut pts = Vec::new();
    for cam in cams {
        let set = renderer::stratified_samples::<rand_chacha::ChaCha8Rng>(cam.near, cam.far, samples, None);
        for ray in renderer::generate_rays(cam) {
            pts.extend(set.t.iter().map(|&t| (ray.at(t), ray.direction)));
        }
    }
    pts
}

fn calibrate(model: &FloatModel, cams: &[Camera], samples: usize) -> Calibration {
    Calibration::observe(model, &calibration_points(cams, samples))
}

/// Saturation events of the quantized model over the calibration views.
fn calibration_saturations(q: &QuantizedModel, cams: &[Camera], samples: usize) -> Result<u64, CliError> {
    let pipeline = Pipeline::fixed(Arc::new(q.clone()), MulMode::Exact);
    let settings = RenderSettings {
        coarse_samples: samples,
        fine_samples: 0,
        seed: 0,
        workers: 1,
        jitter: false,
    };
    let mut n = 0;
    for cam in cams {
        n += renderer::render(&pipeline, cam, &settings)
            .map_err(render_err)?
            .counters
            .saturations;
    }
    Ok(n)
}

/// `33488896` -> `"33,488,896"`.
pub fn thousands(v: u64) -> String {
    let s = v.to_string();
    let mut out = String::with_capacity(s.len() + s.len() / 3);
    for (i, ch) in s.chars().enumerate() {
        if i > 0 && (s.len() - i).is_multiple_of(3) {
            out.push(',');
        }
        out.push(ch);
    }
    out
}

fn human(bytes: u64) -> String {
    let b = bytes as f64;
    if b >= GIB {
        format!("{:.2} GiB", truncate2(b / GIB))
    } else if b >= MIB {
        format!("{:.2} MiB", truncate2(b / MIB))
    } else {
        format!("{:.2} KiB", truncate2(b / 1024.0))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run_str(args: &[&str]) -> (i32, String) {
        let mut buf = Vec::new();
        let code = run(std::iter::once("plenoptic").chain(args.iter().copied()), &mut buf);
        (code, String::from_utf8(buf).unwrap())
    }

    #[test]
    fn thousands_separators() {
        assert_eq!(thousands(33_488_896), "33,488,896");
        assert_eq!(thousands(999), "999");
        assert_eq!(thousands(1000), "1,000");
        assert_eq!(thousands(0), "0");
    }

    #[test]
    fn stats_rows() {
        let (code, s) = run_str(&["stats", "800", "800", "192"]);
        assert_eq!(code, 0);
        assert!(s.contains("1.37 GiB"), "{s}");
        assert!(s.contains("19.22 GiB"), "{s}");
        assert!(s.contains("625.00 MiB"), "{s}");
        assert!(s.contains("3.66 MiB"), "{s}");
        assert!(s.contains("0.586%"), "{s}");
    }

    #[test]
    fn bad_arguments_exit_2() {
        assert_eq!(run_str(&["stats", "0", "800", "192"]).0, EXIT_ARGS);
        assert_eq!(run_str(&["no-such-command"]).0, EXIT_ARGS);
        assert_eq!(run_str(&["render", "--model"]).0, EXIT_ARGS);
    }

    #[test]
    fn missing_model_is_io() {
        let (code, _) = run_str(&["quantize", "/nonexistent/a.icm", "/nonexistent/b.icm"]);
        assert_eq!(code, EXIT_IO);
    }
}
