//! End-to-end run: ingestion, basis selection, choice of `K`, the final
//! chain and the output tables.

use std::collections::{BTreeMap, HashMap};
use std::fs::{self, File};
use std::io::{BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use log::{info, warn};

use crate::basis::{build_design, DesignLayout};
use crate::distributions::QuantileSpec;
use crate::error::{Error, Result};
use crate::model::{Panel, SiteMeta};
use crate::qreg::{select_basis_size, AicScope, BasisSelection};
use crate::sampler::{summarize, write_trace_csv, GammaMode, InitStrategy, PosteriorSummary, Prior, SamplerConfig};
use crate::selection::{select_k, write_cdic_csv};

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Plain,
    Seasonal,
}

/// Fully resolved run settings.
#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct RunConfig {
    pub input: PathBuf,
    pub output: PathBuf,
    pub mode: Mode,
    pub quantiles: [f64; 2],
    pub k_range: Vec<usize>,
    /// Values strictly below the floor are masked.
    pub floors: [f64; 2],
    pub basis_min: usize,
    pub basis_max: usize,
    pub sampler: SamplerConfig,
    pub trace: bool,
}

/// Every key accepted in a config file or as a flag.
pub const CONFIG_KEYS: &[&str] = &[
    "input",
    "output",
    "mode",
    "quantiles",
    "K",
    "floor1",
    "floor2",
    "basis_min",
    "basis_max",
    "iterations",
    "burn_in",
    "thin",
    "seed",
    "phi_window",
    "gamma_mode",
    "gamma",
    "gamma_window",
    "tie_phi",
    "dirichlet",
    "beta_mean",
    "beta_var",
    "sigma_shape",
    "sigma_scale",
    "init",
    "trace",
];

/// Parses a flat `key = value` file; `#` starts a comment.
pub fn parse_config_text(text: &str, path: &str) -> Result<BTreeMap<String, String>> {
    let mut map = BTreeMap::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| Error::Parse {
            path: path.to_string(),
            line: n + 1,
            message: format!("expected `key = value`, got `{line}`"),
        })?;
        let key = key.trim();
        if !CONFIG_KEYS.contains(&key) {
            return Err(Error::config(key, "unknown configuration key"));
        }
        map.insert(key.to_string(), value.trim().to_string());
    }
    Ok(map)
}

fn parse_field<T: std::str::FromStr>(map: &BTreeMap<String, String>, key: &str, default: T) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    match map.get(key) {
        None => Ok(default),
        Some(v) => v
            .parse()
            .map_err(|e| Error::config(key, format!("cannot parse `{v}`: {e}"))),
    }
}

fn parse_bool(map: &BTreeMap<String, String>, key: &str) -> Result<bool> {
    match map.get(key).map(|s| s.to_ascii_lowercase()) {
        None => Ok(false),
        Some(v) => match v.as_str() {
            "true" | "yes" | "1" => Ok(true),
            "false" | "no" | "0" => Ok(false),
            _ => Err(Error::config(key, format!("expected true or false, got `{v}`"))),
        },
    }
}

fn parse_floor(map: &BTreeMap<String, String>, key: &str) -> Result<f64> {
    match map.get(key).map(String::as_str) {
        None => Ok(0.05),
        Some("none") => Ok(f64::NEG_INFINITY),
        Some(v) => v
            .parse::<f64>()
            .ok()
            .filter(|x| x.is_finite())
            .ok_or_else(|| Error::config(key, format!("expected a number or `none`, got `{v}`"))),
    }
}

/// `"3"`, `"2-6"` or `"2,3,5"`.
pub fn parse_k_range(s: &str) -> Result<Vec<usize>> {
    let bad = || Error::config("K", format!("expected K, a range lo-hi or a list, got `{s}`"));
    let mut ks: Vec<usize> = if let Some((a, b)) = s.split_once('-') {
        let a: usize = a.trim().parse().map_err(|_| bad())?;
        let b: usize = b.trim().parse().map_err(|_| bad())?;
        if a > b {
            return Err(bad());
        }
        (a..=b).collect()
    } else {
        s.split(',')
            .map(|x| x.trim().parse().map_err(|_| bad()))
            .collect::<Result<_>>()?
    };
    ks.sort_unstable();
    ks.dedup();
    if ks.is_empty() || ks.contains(&0) {
        return Err(bad());
    }
    Ok(ks)
}

impl RunConfig {
    /// Builds and validates a configuration from merged key/value pairs.
    pub fn from_map(map: &BTreeMap<String, String>) -> Result<Self> {
        if let Some(k) = map.keys().find(|k| !CONFIG_KEYS.contains(&k.as_str())) {
            return Err(Error::config(k.as_str(), "unknown configuration key"));
        }
        let input = map
            .get("input")
            .map(PathBuf::from)
            .ok_or_else(|| Error::config("input", "is required"))?;
        let output = map
            .get("output")
            .map(PathBuf::from)
            .ok_or_else(|| Error::config("output", "is required"))?;
        let mode = match map.get("mode").map(String::as_str).unwrap_or("plain") {
            "plain" => Mode::Plain,
            "seasonal" => Mode::Seasonal,
            other => return Err(Error::config("mode", format!("expected plain or seasonal, got `{other}`"))),
        };
        let quantiles = match map.get("quantiles") {
            None => [0.5, 0.5],
            Some(s) => {
                let v: Vec<f64> = s
                    .split(',')
                    .map(|x| x.trim().parse::<f64>())
                    .collect::<std::result::Result<_, _>>()
                    .map_err(|e| Error::config("quantiles", format!("cannot parse `{s}`: {e}")))?;
                if v.len() != 2 || v.iter().any(|p| !(*p > 0.0 && *p < 1.0)) {
                    return Err(Error::config("quantiles", "expected two levels in (0, 1), e.g. 0.5,0.9"));
                }
                [v[0], v[1]]
            }
        };
        let k_range = parse_k_range(map.get("K").map(String::as_str).unwrap_or("1-6"))?;
        let floors = [parse_floor(map, "floor1")?, parse_floor(map, "floor2")?];
        let (dmin, dmax) = match mode {
            Mode::Plain => (4, 10),
            Mode::Seasonal => (4, 6),
        };
        let basis_min = parse_field(map, "basis_min", dmin)?;
        let basis_max = parse_field(map, "basis_max", dmax)?;
        let min_allowed = match mode {
            Mode::Plain => 4,
            Mode::Seasonal => 2,
        };
        if basis_min < min_allowed {
            return Err(Error::config("basis_min", format!("must be at least {min_allowed}")));
        }
        if basis_max < basis_min {
            return Err(Error::config("basis_max", "must not be smaller than basis_min"));
        }
        let gamma_mode = match map.get("gamma_mode").map(String::as_str).unwrap_or("fixed") {
            "fixed" => GammaMode::Fixed(parse_field(map, "gamma", 0.5)?),
            "sample" => GammaMode::Sample(parse_field(map, "gamma_window", 0.1)?),
            other => return Err(Error::config("gamma_mode", format!("expected fixed or sample, got `{other}`"))),
        };
        let init = match map.get("init").map(String::as_str).unwrap_or("kmeans") {
            "kmeans" => InitStrategy::CurveKMeans,
            "bins" => InitStrategy::MeanQuantileBins,
            other => return Err(Error::config("init", format!("expected kmeans or bins, got `{other}`"))),
        };
        let defaults = SamplerConfig::default();
        let prior_default = Prior::default();
        let sampler = SamplerConfig {
            k: k_range[0],
            iterations: parse_field(map, "iterations", defaults.iterations)?,
            burn_in: parse_field(map, "burn_in", defaults.burn_in)?,
            thin: parse_field(map, "thin", defaults.thin)?,
            seed: parse_field(map, "seed", defaults.seed)?,
            phi_window: parse_field(map, "phi_window", defaults.phi_window)?,
            gamma_mode,
            tie_phi: parse_bool(map, "tie_phi")?,
            prior: Prior {
                dirichlet: parse_field(map, "dirichlet", prior_default.dirichlet)?,
                beta_mean: parse_field(map, "beta_mean", prior_default.beta_mean)?,
                beta_var: parse_field(map, "beta_var", prior_default.beta_var)?,
                sigma_shape: parse_field(map, "sigma_shape", prior_default.sigma_shape)?,
                sigma_scale: parse_field(map, "sigma_scale", prior_default.sigma_scale)?,
            },
            init,
        };
        sampler.validate()?;
        Ok(Self {
            input,
            output,
            mode,
            quantiles,
            k_range,
            floors,
            basis_min,
            basis_max,
            sampler,
            trace: parse_bool(map, "trace")?,
        })
    }

    /// Candidate layouts and the components entering the AIC. Seasonal runs
    /// score the first component only.
    pub fn basis_candidates(&self) -> (Vec<DesignLayout>, AicScope) {
        match self.mode {
            Mode::Plain => (
                (self.basis_min..=self.basis_max)
                    .map(|m| DesignLayout::Plain { m })
                    .collect(),
                AicScope::AllComponents,
            ),
            Mode::Seasonal => {
                let mut v = Vec::new();
                for m1 in self.basis_min..=self.basis_max {
                    for m2 in 3..=6 {
                        for m3 in 3..=6 {
                            v.push(DesignLayout::Seasonal { m1, m2, m3 });
                        }
                    }
                }
                (v, AicScope::FirstComponent)
            }
        }
    }
}

/// Masking counts per component.
#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct ComponentMissingness {
    pub cells: usize,
    /// Absent rows or empty values.
    pub blank: usize,
    /// Present values below the floor.
    pub floored: usize,
    pub missing_percent: f64,
}

#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct MissingnessReport {
    pub components: Vec<ComponentMissingness>,
}

fn parse_err(path: &Path, line: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        path: path.display().to_string(),
        line,
        message: message.into(),
    }
}

fn optional_f64(s: &str) -> std::result::Result<Option<f64>, String> {
    let s = s.trim();
    if s.is_empty() || s.eq_ignore_ascii_case("na") {
        return Ok(None);
    }
    s.parse::<f64>()
        .map_err(|e| format!("cannot parse `{s}`: {e}"))
        .and_then(|v| if v.is_finite() { Ok(Some(v)) } else { Err(format!("non-finite value `{s}`")) })
}

/// Reads a long-format CSV `site_id,lon,lat,t,component,value` with
/// components numbered from 1. Empty values are missing; values below the
/// component's floor are masked.
pub fn load_panel(path: &Path, floors: &[f64]) -> Result<(Panel, MissingnessReport)> {
    let mut text = String::new();
    File::open(path)?.read_to_string(&mut text)?;
    load_panel_from_str(&text, path, floors)
}

pub fn load_panel_from_str(text: &str, path: &Path, floors: &[f64]) -> Result<(Panel, MissingnessReport)> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(text.as_bytes());
    let headers = rdr.headers()?.clone();
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| parse_err(path, 1, format!("missing column `{name}`")))
    };
    let (c_site, c_lon, c_lat, c_t, c_comp, c_val) =
        (col("site_id")?, col("lon")?, col("lat")?, col("t")?, col("component")?, col("value")?);

    struct Row {
        site: usize,
        t: f64,
        j: usize,
        value: Option<f64>,
    }
    let mut sites: Vec<SiteMeta> = Vec::new();
    let mut site_index: HashMap<String, usize> = HashMap::new();
    let mut rows = Vec::new();
    let mut q = 0;
    for (n, rec) in rdr.records().enumerate() {
        let line = n + 2;
        let rec = rec.map_err(|e| parse_err(path, line, e.to_string()))?;
        let get = |c: usize| rec.get(c).unwrap_or("");
        let id = get(c_site).to_string();
        if id.is_empty() {
            return Err(parse_err(path, line, "empty site_id"));
        }
        let lon = optional_f64(get(c_lon)).map_err(|m| parse_err(path, line, format!("lon: {m}")))?;
        let lat = optional_f64(get(c_lat)).map_err(|m| parse_err(path, line, format!("lat: {m}")))?;
        let t = optional_f64(get(c_t))
            .map_err(|m| parse_err(path, line, format!("t: {m}")))?
            .ok_or_else(|| parse_err(path, line, "t is empty"))?;
        let j: usize = get(c_comp)
            .parse()
            .map_err(|_| parse_err(path, line, format!("component `{}` is not a positive integer", get(c_comp))))?;
        if j == 0 {
            return Err(parse_err(path, line, "components are numbered from 1"));
        }
        let value = optional_f64(get(c_val)).map_err(|m| parse_err(path, line, format!("value: {m}")))?;
        let site = *site_index.entry(id.clone()).or_insert_with(|| {
            sites.push(SiteMeta { id, lon, lat });
            sites.len() - 1
        });
        let meta = &sites[site];
        if meta.lon != lon || meta.lat != lat {
            return Err(parse_err(path, line, format!("site `{}` has inconsistent coordinates", meta.id)));
        }
        q = q.max(j);
        rows.push((line, Row { site, t, j: j - 1, value }));
    }
    if rows.is_empty() {
        return Err(parse_err(path, 1, "no data rows"));
    }
    if floors.len() < q {
        return Err(Error::config("floor", format!("need one floor per component ({q})")));
    }
    let mut times: Vec<f64> = rows.iter().map(|(_, r)| r.t).collect();
    times.sort_by(f64::total_cmp);
    times.dedup();
    let tl = times.len();
    let n = sites.len();
    let mut values = vec![0.0; n * q * tl];
    let mut observed = vec![false; n * q * tl];
    let mut seen = vec![false; n * q * tl];
    let mut floored = vec![0usize; q];
    for (line, r) in &rows {
        let t = times.binary_search_by(|x| x.total_cmp(&r.t)).expect("time is present");
        let idx = (r.site * q + r.j) * tl + t;
        if seen[idx] {
            return Err(parse_err(
                path,
                *line,
                format!("duplicate entry for site `{}`, t = {}, component {}", sites[r.site].id, r.t, r.j + 1),
            ));
        }
        seen[idx] = true;
        if let Some(v) = r.value {
            if v < floors[r.j] {
                floored[r.j] += 1;
            } else {
                values[idx] = v;
                observed[idx] = true;
            }
        }
    }
    let panel = Panel::new(q, times, values, observed, sites)?;
    let components = (0..q)
        .map(|j| {
            let cells = n * tl;
            let obs: usize = (0..n).map(|i| panel.observed_count(i, j)).sum();
            ComponentMissingness {
                cells,
                blank: cells - obs - floored[j],
                floored: floored[j],
                missing_percent: 100.0 * (cells - obs) as f64 / cells as f64,
            }
        })
        .collect();
    Ok((panel, MissingnessReport { components }))
}

fn opt_to_string(x: Option<f64>) -> String {
    x.map(|v| v.to_string()).unwrap_or_default()
}

/// Writes every cell of the panel in long format; masked cells get an
/// empty value.
pub fn write_panel<W: Write>(panel: &Panel, out: W) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(out);
    wtr.write_record(["site_id", "lon", "lat", "t", "component", "value"])?;
    for (i, site) in panel.sites().iter().enumerate() {
        for j in 0..panel.q() {
            for (t, time) in panel.times().iter().enumerate() {
                wtr.write_record(&[
                    site.id.clone(),
                    opt_to_string(site.lon),
                    opt_to_string(site.lat),
                    time.to_string(),
                    (j + 1).to_string(),
                    opt_to_string(panel.value(i, j, t)),
                ])?;
            }
        }
    }
    wtr.flush()?;
    Ok(())
}

/// Drops sites with fewer than `min_obs` observed values in some component.
pub fn drop_sparse_sites(panel: &Panel, min_obs: usize) -> (Panel, Vec<String>) {
    let (keep, dropped): (Vec<usize>, Vec<usize>) =
        (0..panel.n()).partition(|&i| (0..panel.q()).all(|j| panel.observed_count(i, j) >= min_obs));
    let names = dropped.iter().map(|&i| panel.sites()[i].id.clone()).collect();
    (panel.select_sites(&keep), names)
}

/// Writes `candidate,width,aic,chosen`.
pub fn write_basis_csv<W: Write>(sel: &BasisSelection, out: W) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(out);
    wtr.write_record(["candidate", "width", "aic", "chosen"])?;
    for s in &sel.scores {
        wtr.write_record(&[
            s.layout.label(),
            s.layout.row_width().to_string(),
            s.aic.map(|a| a.to_string()).unwrap_or_else(|| "NA".into()),
            (s.layout == sel.chosen).to_string(),
        ])?;
    }
    wtr.flush()?;
    Ok(())
}

fn create(dir: &Path, name: &str) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(dir.join(name))?))
}

fn write_summary_tables(panel: &Panel, summary: &PosteriorSummary, dir: &Path) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(create(dir, "memberships.csv")?);
    wtr.write_record(["site_id", "lon", "lat", "cluster"])?;
    for (site, &c) in panel.sites().iter().zip(&summary.membership_mode) {
        wtr.write_record(&[
            site.id.clone(),
            opt_to_string(site.lon),
            opt_to_string(site.lat),
            (c + 1).to_string(),
        ])?;
    }
    wtr.flush()?;

    let mut wtr = csv::Writer::from_writer(create(dir, "curves.csv")?);
    wtr.write_record(["cluster", "component", "t", "fitted_quantile"])?;
    for (k, comps) in summary.curves.iter().enumerate() {
        for (j, curve) in comps.iter().enumerate() {
            for (t, v) in panel.times().iter().zip(curve) {
                wtr.write_record(&[(k + 1).to_string(), (j + 1).to_string(), t.to_string(), v.to_string()])?;
            }
        }
    }
    wtr.flush()?;

    let mut wtr = csv::Writer::from_writer(create(dir, "posterior.csv")?);
    wtr.write_record(["parameter", "cluster", "component", "mean", "sd"])?;
    for k in 0..summary.k {
        let c = (k + 1).to_string();
        let mut rows: Vec<(&str, String, f64, f64)> =
            vec![("alpha", String::new(), summary.alpha_mean[k], summary.alpha_sd[k])];
        for j in 0..summary.sigma_mean[k].len() {
            rows.push(("sigma", (j + 1).to_string(), summary.sigma_mean[k][j], summary.sigma_sd[k][j]));
        }
        rows.push(("phi", String::new(), summary.phi_mean[k], summary.phi_sd[k]));
        rows.push(("gamma", String::new(), summary.gamma_mean[k], summary.gamma_sd[k]));
        for (name, comp, mean, sd) in rows {
            wtr.write_record(&[name.to_string(), c.clone(), comp, mean.to_string(), sd.to_string()])?;
        }
    }
    wtr.flush()?;
    Ok(())
}

/// What a successful run produced.
#[derive(Debug, Clone, PartialEq)]
pub struct RunOutcome {
    pub chosen_k: usize,
    pub basis: DesignLayout,
    pub summary: PosteriorSummary,
}

/// Runs the whole pipeline and writes its outputs into `config.output`.
/// On failure the files written so far are kept and `error.json` records
/// the error.
pub fn run_pipeline(config: &RunConfig) -> Result<RunOutcome> {
    fs::create_dir_all(&config.output)?;
    let _ = fs::remove_file(config.output.join("error.json"));
    let result = run_stages(config);
    if let Err(e) = &result {
        let body = serde_json::json!({
            "error": error_kind(e),
            "message": e.to_string(),
        });
        let mut f = create(&config.output, "error.json")?;
        serde_json::to_writer_pretty(&mut f, &body)?;
        f.flush()?;
    }
    result
}

/// Short machine-readable class of an error.
pub fn error_kind(e: &Error) -> &'static str {
    match e {
        Error::Config { .. } => "config",
        Error::Parse { .. } => "parse",
        Error::Numerical(_) | Error::Sweep { .. } => "numerical",
        Error::Underdetermined { .. } => "underdetermined",
        Error::Domain(_) => "domain",
        Error::Io(_) | Error::Csv(_) | Error::Json(_) => "io",
    }
}

fn run_stages(config: &RunConfig) -> Result<RunOutcome> {
    let dir = &config.output;
    let (panel, missing) = load_panel(&config.input, &config.floors)?;
    if panel.q() != 2 {
        return Err(Error::domain(format!("expected 2 components, found {}", panel.q())));
    }
    for (j, c) in missing.components.iter().enumerate() {
        info!("component {}: {:.2}% missing ({} below floor)", j + 1, c.missing_percent, c.floored);
    }
    let (candidates, scope) = config.basis_candidates();
    let max_width = candidates.iter().map(|c| c.row_width()).max().unwrap_or(1);
    let (panel, dropped) = drop_sparse_sites(&panel, max_width);
    if !dropped.is_empty() {
        warn!("dropped {} sites with fewer than {max_width} observed values: {:?}", dropped.len(), dropped);
    }
    if panel.n() == 0 {
        return Err(Error::domain("no site has enough observed values"));
    }
    let quant = QuantileSpec::new(&config.quantiles)?;
    let basis = select_basis_size(&panel, &candidates, &quant, scope)?;
    write_basis_csv(&basis, create(dir, "basis_selection.csv")?)?;
    info!("basis {} chosen", basis.chosen.label());
    let design = build_design(basis.chosen, panel.times(), 2)?;

    let selection = select_k(&panel, &design, &quant, &config.k_range, &config.sampler)?;
    write_cdic_csv(&selection.report, create(dir, "cdic.csv")?)?;
    let chosen_k = selection.report.chosen_k.ok_or_else(|| {
        let msgs: Vec<String> = selection
            .report
            .rows
            .iter()
            .filter_map(|r| r.error.as_ref().map(|e| format!("K = {}: {e}", r.k)))
            .collect();
        Error::numerical(format!("every chain failed: {}", msgs.join("; ")))
    })?;
    let trace = selection.chosen_trace().expect("chosen K has a trace");
    let summary = summarize(trace, &design)?;
    write_summary_tables(&panel, &summary, dir)?;
    if config.trace {
        let mut f = create(dir, "trace.csv")?;
        write_trace_csv(trace, Some(&summary), &mut f)?;
        f.flush()?;
    }
    let run = serde_json::json!({
        "config": config,
        "seed": config.sampler.seed,
        "chosen_k": chosen_k,
        "basis": basis.chosen.label(),
        "basis_layout": basis.chosen,
        "sites_used": panel.n(),
        "sites_dropped": dropped,
        "missingness": missing,
        "acceptance": {
            "weights": trace.acceptance.weights.rate(),
            "sigma": trace.acceptance.sigma.rate(),
            "phi": trace.acceptance.phi.rate(),
            "gamma": trace.acceptance.gamma.rate(),
        },
        "stored_draws": trace.draws.len(),
    });
    let mut f = create(dir, "run.json")?;
    serde_json::to_writer_pretty(&mut f, &run)?;
    f.flush()?;
    Ok(RunOutcome {
        chosen_k,
        basis: basis.chosen,
        summary,
    })
}
