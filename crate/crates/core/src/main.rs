use std::collections::BTreeMap;
use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Arg, ArgAction, ArgMatches, Command};

use biquant::pipeline::{
    load_panel, parse_config_text, run_pipeline, write_basis_csv, write_panel, RunConfig, CONFIG_KEYS,
};
use biquant::qreg::select_basis_size;
use biquant::distributions::QuantileSpec;
use biquant::simbench::{
    adjusted_rand_index, gen_panel, run_benchmark, write_benchmark_csv, BenchmarkRow, BenchmarkSettings,
    Scenario, SimConfig,
};
use biquant::{Error, Result};

fn cli() -> Command {
    let mut fit = Command::new("fit")
        .about("Select the basis and K, run the sampler and write all outputs")
        .arg(Arg::new("config").long("config").value_name("FILE").help("key = value configuration file"));
    for key in CONFIG_KEYS {
        fit = fit.arg(Arg::new(*key).long(*key).value_name("VALUE"));
    }
    Command::new("biquant")
        .about("Bivariate quantile mixture clustering of panel time series")
        .subcommand_required(true)
        .subcommand(fit)
        .subcommand(
            Command::new("simulate")
                .about("Generate a synthetic three-cluster panel")
                .arg(Arg::new("scenario").long("scenario").default_value("A"))
                .arg(Arg::new("n_per_cluster").long("n_per_cluster").default_value("30"))
                .arg(Arg::new("T").long("T").default_value("60"))
                .arg(Arg::new("rho").long("rho").default_value("0"))
                .arg(Arg::new("theta").long("theta").default_value("0"))
                .arg(Arg::new("seed").long("seed").default_value("1"))
                .arg(Arg::new("output").long("output").required(true).value_name("CSV"))
                .arg(Arg::new("labels").long("labels").value_name("CSV")),
        )
        .subcommand(
            Command::new("benchmark")
                .about("Mean ARI over replications of the simulation study")
                .arg(
                    Arg::new("rows")
                        .long("rows")
                        .default_value("A:0:0,A:0.5:1,B:0:0")
                        .help("comma separated scenario:rho:theta triples"),
                )
                .arg(Arg::new("scale").long("scale").default_value("desk").value_parser(["desk", "full"]))
                .arg(Arg::new("replications").long("replications"))
                .arg(Arg::new("seed").long("seed").default_value("1"))
                .arg(Arg::new("output").long("output").value_name("CSV")),
        )
        .subcommand(
            Command::new("select-basis")
                .about("Score basis sizes with the check-loss AIC")
                .arg(Arg::new("input").long("input").required(true))
                .arg(Arg::new("mode").long("mode"))
                .arg(Arg::new("quantiles").long("quantiles"))
                .arg(Arg::new("basis_min").long("basis_min"))
                .arg(Arg::new("basis_max").long("basis_max"))
                .arg(Arg::new("floor1").long("floor1"))
                .arg(Arg::new("floor2").long("floor2"))
                .arg(Arg::new("output").long("output").value_name("CSV")),
        )
        .subcommand(
            Command::new("ari")
                .about("Adjusted Rand index between two label files (site_id,cluster)")
                .arg(Arg::new("first").required(true))
                .arg(Arg::new("second").required(true)),
        )
        .arg(Arg::new("verbose").short('v').long("verbose").action(ArgAction::Count).global(true))
}

fn parse<T: std::str::FromStr>(m: &ArgMatches, key: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    let v = m.get_one::<String>(key).expect("defaulted argument");
    v.parse().map_err(|e| Error::Config {
        field: key.to_string(),
        message: format!("cannot parse `{v}`: {e}"),
    })
}

fn output(path: Option<&String>) -> Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(File::create(p)?)),
        None => Box::new(io::stdout().lock()),
    })
}

fn merged_config(m: &ArgMatches, keys: &[&str]) -> Result<BTreeMap<String, String>> {
    let mut map = match m.try_get_one::<String>("config").ok().flatten() {
        Some(path) => parse_config_text(&std::fs::read_to_string(path)?, path)?,
        None => BTreeMap::new(),
    };
    for key in keys {
        if let Some(v) = m.get_one::<String>(key) {
            map.insert(key.to_string(), v.clone());
        }
    }
    Ok(map)
}

fn cmd_fit(m: &ArgMatches) -> Result<()> {
    let config = RunConfig::from_map(&merged_config(m, CONFIG_KEYS)?)?;
    let outcome = run_pipeline(&config)?;
    println!(
        "K = {}, basis {}, outputs in {}",
        outcome.chosen_k,
        outcome.basis.label(),
        config.output.display()
    );
    Ok(())
}

fn cmd_simulate(m: &ArgMatches) -> Result<()> {
    let sim = SimConfig {
        scenario: parse(m, "scenario")?,
        n_per_cluster: parse(m, "n_per_cluster")?,
        t_len: parse(m, "T")?,
        rho: parse(m, "rho")?,
        theta_ma: parse(m, "theta")?,
        seed: parse(m, "seed")?,
    };
    let (panel, truth) = gen_panel(&sim)?;
    write_panel(&panel, BufWriter::new(File::create(m.get_one::<String>("output").unwrap())?))?;
    if let Some(path) = m.get_one::<String>("labels") {
        let mut wtr = csv::Writer::from_path(path)?;
        wtr.write_record(["site_id", "cluster"])?;
        for (site, l) in panel.sites().iter().zip(truth.labels()) {
            wtr.write_record(&[site.id.clone(), l.to_string()])?;
        }
        wtr.flush()?;
    }
    Ok(())
}

fn cmd_benchmark(m: &ArgMatches) -> Result<()> {
    let seed: u64 = parse(m, "seed")?;
    let mut settings = match m.get_one::<String>("scale").map(String::as_str) {
        Some("full") => BenchmarkSettings::full(seed),
        _ => BenchmarkSettings::desk(seed),
    };
    if m.get_one::<String>("replications").is_some() {
        settings.replications = parse(m, "replications")?;
    }
    let rows = m
        .get_one::<String>("rows")
        .unwrap()
        .split(',')
        .map(|spec| {
            let parts: Vec<&str> = spec.split(':').collect();
            let bad = || Error::Config {
                field: "rows".into(),
                message: format!("expected scenario:rho:theta, got `{spec}`"),
            };
            if parts.len() != 3 {
                return Err(bad());
            }
            Ok(BenchmarkRow {
                scenario: parts[0].parse::<Scenario>()?,
                rho: parts[1].trim().parse().map_err(|_| bad())?,
                theta: parts[2].trim().parse().map_err(|_| bad())?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let results = run_benchmark(&rows, &settings)?;
    write_benchmark_csv(&results, output(m.get_one::<String>("output"))?)
}

fn cmd_select_basis(m: &ArgMatches) -> Result<()> {
    let keys = ["input", "mode", "quantiles", "basis_min", "basis_max", "floor1", "floor2"];
    let mut map = merged_config(m, &keys)?;
    map.insert("output".into(), ".".into());
    let config = RunConfig::from_map(&map)?;
    let (panel, _) = load_panel(&config.input, &config.floors)?;
    let (candidates, scope) = config.basis_candidates();
    let quant = QuantileSpec::new(&config.quantiles)?;
    let sel = select_basis_size(&panel, &candidates, &quant, scope)?;
    write_basis_csv(&sel, output(m.get_one::<String>("output"))?)
}

fn read_labels(path: &Path) -> Result<BTreeMap<String, usize>> {
    let mut rdr = csv::Reader::from_path(path)?;
    let headers = rdr.headers()?.clone();
    let find = |name: &str| {
        headers.iter().position(|h| h == name).ok_or_else(|| Error::Parse {
            path: path.display().to_string(),
            line: 1,
            message: format!("missing column `{name}`"),
        })
    };
    let (cs, cc) = (find("site_id")?, find("cluster")?);
    let mut out = BTreeMap::new();
    for (n, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let err = |message: String| Error::Parse {
            path: path.display().to_string(),
            line: n + 2,
            message,
        };
        let label: usize = rec[cc].trim().parse().map_err(|_| err(format!("bad cluster `{}`", &rec[cc])))?;
        if out.insert(rec[cs].to_string(), label).is_some() {
            return Err(err(format!("duplicate site `{}`", &rec[cs])));
        }
    }
    Ok(out)
}

fn cmd_ari(m: &ArgMatches) -> Result<()> {
    let a = read_labels(&PathBuf::from(m.get_one::<String>("first").unwrap()))?;
    let b = read_labels(&PathBuf::from(m.get_one::<String>("second").unwrap()))?;
    if a.len() != b.len() || a.keys().any(|k| !b.contains_key(k)) {
        return Err(Error::Domain("label files cover different sites".into()));
    }
    let la: Vec<usize> = a.values().copied().collect();
    let lb: Vec<usize> = a.keys().map(|k| b[k]).collect();
    println!("{}", adjusted_rand_index(&la, &lb)?);
    Ok(())
}

fn main() -> ExitCode {
    let matches = cli().get_matches();
    let level = match matches.get_count("verbose") {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    let result = match matches.subcommand() {
        Some(("fit", m)) => cmd_fit(m),
        Some(("simulate", m)) => cmd_simulate(m),
        Some(("benchmark", m)) => cmd_benchmark(m),
        Some(("select-basis", m)) => cmd_select_basis(m),
        Some(("ari", m)) => cmd_ari(m),
        _ => unreachable!("subcommand is required"),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(match e {
                Error::Config { .. } => 2,
                ref e if e.is_numerical() => 3,
                _ => 1,
            })
        }
    }
}
