//! Persisted artefacts: per-chain draws, diagnostics, summaries, and output
//! directories that appear atomically.
//!
//! A fit directory holds everything needed to rebuild the posterior:
//!
//! | file | content |
//! |---|---|
//! | `chain_<i>.csv` | draws of chain `i` (1-based), one column per parameter |
//! | `chain_<i>_stats.csv` | per-iteration sampler statistics |
//! | `diagnostics.json` | split-Rhat, bulk ESS, divergences, step sizes |
//! | `summary.txt` | posterior quantiles of the hyperparameters |
//! | `config.toml` | the resolved run configuration |
//! | `data.csv` | the dataset that was fitted |
//! | `scales.csv` | the input standardization |

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use log::warn;
use serde::Serialize;

use crate::config::RunConfig;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::fit::{build_model, Fit, RHAT_THRESHOLD};
use crate::numeric::{fmt17, quantile_sorted};
use crate::sampler::nuts::TransitionStats;
use crate::sampler::{ChainDraws, Diagnostics, LogDensity, PosteriorDraws};

pub const CONFIG_FILE: &str = "config.toml";
pub const DATA_FILE: &str = "data.csv";
pub const DIAGNOSTICS_FILE: &str = "diagnostics.json";
pub const SUMMARY_FILE: &str = "summary.txt";
pub const SCALES_FILE: &str = "scales.csv";

pub fn chain_file(chain: usize) -> String {
    format!("chain_{}.csv", chain + 1)
}

fn stats_file(chain: usize) -> String {
    format!("chain_{}_stats.csv", chain + 1)
}

/// JSON formatter that prints every number with 17 significant digits.
struct Fmt17Formatter(serde_json::ser::PrettyFormatter<'static>);

macro_rules! delegate {
    ($($name:ident($($arg:ident: $ty:ty),*)),* $(,)?) => {
        $(fn $name<W: ?Sized + Write>(&mut self, w: &mut W $(, $arg: $ty)*) -> std::io::Result<()> {
            self.0.$name(w $(, $arg)*)
        })*
    };
}

impl serde_json::ser::Formatter for Fmt17Formatter {
    delegate!(
        begin_array(),
        end_array(),
        begin_array_value(first: bool),
        end_array_value(),
        begin_object(),
        end_object(),
        begin_object_key(first: bool),
        begin_object_value(),
        end_object_value(),
    );

    fn write_f64<W: ?Sized + Write>(&mut self, w: &mut W, value: f64) -> std::io::Result<()> {
        w.write_all(fmt17(value).as_bytes())
    }
}

/// Pretty JSON with 17-significant-digit numbers; non-finite values become `null`.
pub fn to_json<T: Serialize>(value: &T) -> String {
    let mut out = Vec::new();
    let mut ser =
        serde_json::Serializer::with_formatter(&mut out, Fmt17Formatter(Default::default()));
    value.serialize(&mut ser).expect("value serialises");
    out.push(b'\n');
    String::from_utf8(out).expect("JSON is UTF-8")
}

/// A directory populated under a temporary name and renamed into place.
pub struct OutputDir {
    target: PathBuf,
    staging: PathBuf,
    force: bool,
}

impl OutputDir {
    /// Fails if `target` exists and `force` is not set.
    pub fn create(target: impl AsRef<Path>, force: bool) -> Result<OutputDir> {
        let target = target.as_ref().to_path_buf();
        check_overwrite(&target, force)?;
        let name = target
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_else(|| "out".into());
        let staging = target.with_file_name(format!(".{name}.partial-{}", std::process::id()));
        if staging.exists() {
            fs::remove_dir_all(&staging).map_err(|e| Error::io(&staging, e))?;
        }
        fs::create_dir_all(&staging).map_err(|e| Error::io(&staging, e))?;
        Ok(OutputDir {
            target,
            staging,
            force,
        })
    }

    pub fn path(&self, file: &str) -> PathBuf {
        self.staging.join(file)
    }

    pub fn write(
        &self,
        file: &str,
        f: impl FnOnce(&mut dyn Write) -> std::io::Result<()>,
    ) -> Result<()> {
        write_file(&self.path(file), f)
    }

    pub fn commit(self) -> Result<PathBuf> {
        if self.target.exists() {
            if !self.force {
                return Err(overwrite_error(&self.target));
            }
            remove_path(&self.target)?;
        }
        fs::rename(&self.staging, &self.target).map_err(|e| Error::io(&self.target, e))?;
        Ok(self.target.clone())
    }
}

impl Drop for OutputDir {
    fn drop(&mut self) {
        if self.staging.exists() {
            let _ = fs::remove_dir_all(&self.staging);
        }
    }
}

fn overwrite_error(path: &Path) -> Error {
    Error::Config(format!(
        "{} already exists; pass --force to overwrite it",
        path.display()
    ))
}

/// Fails if `path` exists and `force` is not set.
pub fn check_overwrite(path: &Path, force: bool) -> Result<()> {
    if path.exists() && !force {
        return Err(overwrite_error(path));
    }
    Ok(())
}

fn remove_path(path: &Path) -> Result<()> {
    let r = if path.is_dir() {
        fs::remove_dir_all(path)
    } else {
        fs::remove_file(path)
    };
    r.map_err(|e| Error::io(path, e))
}

fn write_file(path: &Path, f: impl FnOnce(&mut dyn Write) -> std::io::Result<()>) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    f(&mut w)
        .and_then(|_| w.flush())
        .map_err(|e| Error::io(path, e))
}

/// Writes a single file via a temporary sibling and a rename.
pub fn write_atomic(
    path: impl AsRef<Path>,
    force: bool,
    f: impl FnOnce(&mut dyn Write) -> std::io::Result<()>,
) -> Result<()> {
    let path = path.as_ref();
    check_overwrite(path, force)?;
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let name = path
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();
    let tmp = path.with_file_name(format!(".{name}.partial-{}", std::process::id()));
    let result =
        write_file(&tmp, f).and_then(|_| fs::rename(&tmp, path).map_err(|e| Error::io(path, e)));
    if result.is_err() {
        let _ = fs::remove_file(&tmp);
    }
    result
}

/// Parameter names such as `b[1,2]` contain commas, so the header is quoted.
pub fn write_chain_csv(
    chain: &ChainDraws,
    names: &[String],
    w: &mut dyn Write,
) -> std::io::Result<()> {
    let mut csv = csv::Writer::from_writer(w);
    csv.write_record(names)?;
    for d in &chain.draws {
        csv.write_record(d.iter().map(|v| fmt17(*v)))?;
    }
    csv.flush()
}

fn write_stats_csv(chain: &ChainDraws, w: &mut dyn Write) -> std::io::Result<()> {
    writeln!(w, "lp,accept_stat,n_leapfrog,treedepth,divergent,energy")?;
    for (s, lp) in chain.stats.iter().zip(&chain.lp) {
        writeln!(
            w,
            "{},{},{},{},{},{}",
            fmt17(*lp),
            fmt17(s.accept_stat),
            s.n_leapfrog,
            s.treedepth,
            u8::from(s.divergent),
            fmt17(s.energy)
        )?;
    }
    Ok(())
}

#[derive(Serialize)]
struct DiagnosticsFile<'a> {
    converged: bool,
    rhat_threshold: f64,
    chains: usize,
    samples_per_chain: usize,
    #[serde(flatten)]
    diagnostics: &'a Diagnostics,
}

/// Human-readable posterior summary of the hyperparameters.
pub fn write_summary(fit: &Fit, w: &mut dyn Write) -> std::io::Result<()> {
    let d = &fit.diagnostics;
    writeln!(
        w,
        "chains: {}  samples per chain: {}  divergences: {}",
        fit.draws.n_chains(),
        fit.draws.n_samples(),
        d.divergences.iter().sum::<usize>()
    )?;
    writeln!(
        w,
        "max split-Rhat: {:.4}  min bulk ESS: {:.1}",
        d.max_rhat, d.min_ess_bulk
    )?;
    writeln!(
        w,
        "converged (all split-Rhat < {RHAT_THRESHOLD}): {}",
        fit.converged()
    )?;
    writeln!(w)?;
    writeln!(
        w,
        "{:<10} {:>11} {:>11} {:>11} {:>11} {:>11} {:>11} {:>11} {:>8} {:>8}",
        "parameter", "mean", "sd", "2.5%", "25%", "50%", "75%", "97.5%", "rhat", "ess"
    )?;
    let l = &fit.model.layout;
    for j in l.alpha_offset()..l.dim() {
        let mut all: Vec<f64> = fit.draws.param(j).into_iter().flatten().collect();
        all.sort_by(f64::total_cmp);
        let p = &d.params[j];
        let q = |x: f64| quantile_sorted(&all, x);
        writeln!(
            w,
            "{:<10} {:>11.4e} {:>11.4e} {:>11.4e} {:>11.4e} {:>11.4e} {:>11.4e} {:>11.4e} {:>8.4} {:>8.1}",
            p.name,
            p.mean,
            p.sd,
            q(0.025),
            q(0.25),
            q(0.5),
            q(0.75),
            q(0.975),
            p.rhat,
            p.ess_bulk
        )?;
    }
    Ok(())
}

/// Writes a complete fit directory.
pub fn save_fit(
    fit: &Fit,
    ds: &Dataset,
    cfg: &RunConfig,
    dir: impl AsRef<Path>,
    force: bool,
) -> Result<PathBuf> {
    let out = OutputDir::create(dir, force)?;
    let names = &fit.draws.names;
    for (c, chain) in fit.draws.chains.iter().enumerate() {
        out.write(&chain_file(c), |w| write_chain_csv(chain, names, w))?;
        out.write(&stats_file(c), |w| write_stats_csv(chain, w))?;
    }
    let diag = DiagnosticsFile {
        converged: fit.converged(),
        rhat_threshold: RHAT_THRESHOLD,
        chains: fit.draws.n_chains(),
        samples_per_chain: fit.draws.n_samples(),
        diagnostics: &fit.diagnostics,
    };
    out.write(DIAGNOSTICS_FILE, |w| w.write_all(to_json(&diag).as_bytes()))?;
    out.write(SUMMARY_FILE, |w| write_summary(fit, w))?;
    out.write(CONFIG_FILE, |w| {
        w.write_all(cfg.to_toml_string().as_bytes())
    })?;
    out.write(DATA_FILE, |mut w| ds.write_to(&mut w))?;
    out.write(SCALES_FILE, |mut w| fit.inputs.write_scales(&mut w))?;
    out.commit()
}

fn parse_chain(path: &Path, names: &[String]) -> Result<Vec<Vec<f64>>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_reader(file);
    let header: Vec<String> = rdr
        .headers()
        .map_err(|e| Error::Schema(format!("{}: unreadable header: {e}", path.display())))?
        .iter()
        .map(str::to_string)
        .collect();
    if header != names {
        return Err(Error::Schema(format!(
            "{}: columns do not match the model parameters",
            path.display()
        )));
    }
    let mut draws = Vec::new();
    for (r, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| Error::Parse {
            row: r + 1,
            column: String::new(),
            message: e.to_string(),
        })?;
        let row = rec
            .iter()
            .enumerate()
            .map(|(c, v)| {
                v.trim().parse::<f64>().map_err(|e| Error::Parse {
                    row: r + 1,
                    column: names[c].clone(),
                    message: e.to_string(),
                })
            })
            .collect::<Result<Vec<f64>>>()?;
        draws.push(row);
    }
    Ok(draws)
}

/// Reads `chain_1.csv`, `chain_2.csv`, ... from a fit directory.
pub fn load_draws(dir: impl AsRef<Path>, names: &[String]) -> Result<PosteriorDraws> {
    let dir = dir.as_ref();
    let first = dir.join(chain_file(0));
    if !first.is_file() {
        return Err(Error::Config(format!(
            "missing draws file {}; run `gpspline fit` first",
            first.display()
        )));
    }
    let mut chains = Vec::new();
    for c in 0.. {
        let path = dir.join(chain_file(c));
        if !path.is_file() {
            break;
        }
        let draws = parse_chain(&path, names)?;
        chains.push(ChainDraws {
            lp: vec![f64::NAN; draws.len()],
            stats: vec![TransitionStats::default(); draws.len()],
            draws,
            step_size: f64::NAN,
            inv_metric: Vec::new(),
            warmup_leapfrogs: 0,
        });
    }
    Ok(PosteriorDraws {
        names: names.to_vec(),
        chains,
    })
}

/// Maximum split-Rhat recorded in a fit directory's diagnostics.
pub fn recorded_max_rhat(dir: impl AsRef<Path>) -> Result<f64> {
    let path = dir.as_ref().join(DIAGNOSTICS_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let v: serde_json::Value = serde_json::from_str(&text)
        .map_err(|e| Error::Schema(format!("{}: {e}", path.display())))?;
    Ok(v.get("max_rhat")
        .and_then(|m| m.as_f64())
        .unwrap_or(f64::INFINITY))
}

/// A fit directory loaded back into memory.
pub struct LoadedFit {
    pub cfg: RunConfig,
    pub ds: Dataset,
    pub fit: Fit,
}

/// Rebuilds a fit saved by [`save_fit`]. Unconverged fits are refused
/// unless `force` is set.
pub fn load_fit(dir: impl AsRef<Path>, force: bool) -> Result<LoadedFit> {
    let dir = dir.as_ref();
    let first = dir.join(chain_file(0));
    if !first.is_file() {
        return Err(Error::Config(format!(
            "missing draws file {}; run `gpspline fit` first",
            first.display()
        )));
    }
    let cfg = RunConfig::load(dir.join(CONFIG_FILE))?;
    let ds = Dataset::load(dir.join(DATA_FILE))?;
    let (model, inputs) = build_model(&ds, &cfg.model)?;
    let draws = load_draws(dir, &model.param_names())?;
    let max_rhat = recorded_max_rhat(dir)?;
    if !(max_rhat < RHAT_THRESHOLD) {
        let msg = format!(
            "fit in {} did not converge (max split-Rhat {max_rhat:.3} >= {RHAT_THRESHOLD})",
            dir.display()
        );
        if !force {
            return Err(Error::Convergence(format!(
                "{msg}; pass --force to use it anyway"
            )));
        }
        warn!("{msg}; continuing because of --force");
    }
    let diagnostics = draws.diagnostics(cfg.sampler.max_treedepth);
    Ok(LoadedFit {
        cfg,
        ds,
        fit: Fit {
            model,
            inputs,
            draws,
            diagnostics,
        },
    })
}
