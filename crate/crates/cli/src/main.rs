//! `elorax`: extract, project and account for shared adapter subspaces.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{ArgGroup, Parser, Subcommand, ValueEnum};
use rayon::prelude::*;

use elorax_core::accounting::{self, format_ratio, DeployConfig};
use elorax_core::domain_sim::{self, SimConfig, SimMetrics};
use elorax_core::projection::{self, reconstruct_adapter, reconstruction_report, role_vectors};
use elorax_core::store::{self, load_adapter_bundle, save_adapter_bundle, AdapterBundle};
use elorax_core::subspace::{augment_pseudo, explained_variance, extract_subspace, SiteSubspace};
use elorax_core::{CoefficientSet, Error, KPolicy, SubspaceSet, SvdMode};

#[derive(Parser, Debug)]
#[command(name = "elorax", version, about = "Recycle low-rank adapters into a shared principal subspace")]
struct Cli {
    /// Seed for every random draw; runs with the same seed write identical bytes.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Suppress progress output on stderr.
    #[arg(long, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Build a subspace bundle from a collection of adapters.
    #[command(group(ArgGroup::new("policy").required(true).args(["k", "variance"])))]
    Extract {
        #[arg(long, num_args = 1.., required = true)]
        adapters: Vec<PathBuf>,
        #[arg(long)]
        k: Option<usize>,
        #[arg(long)]
        variance: Option<f64>,
        #[arg(long, default_value_t = 0)]
        pseudo: usize,
        #[arg(long, value_enum, default_value_t = SvdArg::Exact)]
        svd: SvdArg,
        #[arg(long)]
        out: PathBuf,
    },
    /// Append pseudo-components to an existing subspace bundle.
    Augment {
        #[arg(long)]
        subspace: PathBuf,
        #[arg(long)]
        pseudo: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fit coefficients of one adapter against a subspace bundle.
    Project {
        #[arg(long)]
        subspace: PathBuf,
        #[arg(long)]
        adapter: PathBuf,
        #[arg(long, default_value_t = true, action = clap::ArgAction::Set)]
        include_mean: bool,
        #[arg(long)]
        out: PathBuf,
        /// Residual CSV path.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Rebuild an adapter bundle from coefficients.
    Reconstruct {
        #[arg(long)]
        subspace: PathBuf,
        #[arg(long)]
        coeffs: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Explained-variance and reconstruction-error tables.
    Report {
        #[arg(long)]
        subspace: PathBuf,
        #[arg(long, num_args = 1.., required = true)]
        adapters: Vec<PathBuf>,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Parameter, storage and compute counts for a deployment.
    Account {
        #[arg(long)]
        config: PathBuf,
        /// Also write the counts as JSON.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run a synthetic-domain protocol.
    Simulate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_enum)]
        protocol: Protocol,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum SvdArg {
    Exact,
    Randomized,
}

impl From<SvdArg> for SvdMode {
    fn from(a: SvdArg) -> Self {
        match a {
            SvdArg::Exact => SvdMode::Exact,
            SvdArg::Randomized => SvdMode::Randomized,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Protocol {
    Loo,
    Lowres,
    Trends,
}

struct Failure {
    code: u8,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure {
            code: if e.is_numerical() { 3 } else { 2 },
            message: e.to_string(),
        }
    }
}

fn input_error(message: impl Into<String>) -> Failure {
    Failure { code: 2, message: message.into() }
}

type CliResult<T = ()> = Result<T, Failure>;

struct Ctx {
    seed: u64,
    /// Set only when `--seed` was passed; simulate otherwise keeps the config's seed.
    seed_override: Option<u64>,
    quiet: bool,
}

impl Ctx {
    fn progress(&self, msg: impl AsRef<str>) {
        if !self.quiet {
            eprintln!("{}", msg.as_ref());
        }
    }
}

fn write_file(path: &Path, contents: &str) -> CliResult {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| input_error(format!("{}: {e}", parent.display())))?;
    }
    fs::write(path, contents).map_err(|e| input_error(format!("{}: {e}", path.display())))
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> CliResult<T> {
    let text = fs::read_to_string(path).map_err(|e| input_error(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| input_error(format!("{}: {e}", path.display())))
}

fn load_bundles(dirs: &[PathBuf]) -> CliResult<Vec<AdapterBundle>> {
    Ok(dirs.iter().map(|d| load_adapter_bundle(d)).collect::<Result<_, _>>()?)
}

fn variance_csv(subs: &SubspaceSet) -> CliResult<String> {
    let mut out = String::from("site_name,role,k,sigma,cum_variance,selected\n");
    for sub in subs.sites.values() {
        for (i, sigma) in sub.singular_values.iter().enumerate() {
            let k = i + 1;
            let cum = explained_variance(sub, k)?;
            out.push_str(&format!(
                "{},{},{},{},{:.4},{}\n",
                sub.site.name,
                sub.site.role,
                k,
                sigma,
                cum,
                k <= sub.k_data
            ));
        }
    }
    Ok(out)
}

fn cmd_extract(
    ctx: &Ctx,
    adapters: &[PathBuf],
    policy: KPolicy,
    pseudo: usize,
    mode: SvdMode,
    out: &Path,
) -> CliResult {
    policy.validate()?;
    let bundles = load_bundles(adapters)?;
    let catalog = store::validate_collection(&bundles)?;
    for w in &catalog.warnings {
        ctx.progress(format!("warning: site {w} is missing from some adapters, skipped"));
    }
    let ids: Vec<_> = catalog.sites.keys().cloned().collect();
    ctx.progress(format!("extracting {} sites from {} adapters", ids.len(), bundles.len()));
    let subs: Vec<SiteSubspace<f64>> = ids
        .par_iter()
        .map(|id| {
            let stacked = store::stack_site(&bundles, id)?.to_array::<f64>();
            let sub = extract_subspace(id.clone(), stacked.view(), policy, mode, ctx.seed)?;
            if pseudo > 0 && !sub.degenerate {
                augment_pseudo(&sub, pseudo, ctx.seed)
            } else {
                Ok(sub)
            }
        })
        .collect::<Result<_, Error>>()?;
    if subs.iter().all(|s| s.degenerate) {
        return Err(Error::DegenerateStack.into());
    }
    for s in subs.iter().filter(|s| s.degenerate) {
        ctx.progress(format!("warning: site {} is degenerate, stored mean only", s.site));
    }
    let set = SubspaceSet {
        base_model_id: bundles[0].base_model_id.clone(),
        source_adapter_ids: bundles.iter().map(|b| b.adapter_id.clone()).collect(),
        seed: ctx.seed,
        svd_mode: mode,
        sites: subs.into_iter().map(|s| (s.site.clone(), s)).collect(),
    };
    let hash = set.save(out)?;
    write_file(&out.join("explained_variance.csv"), &variance_csv(&set)?)?;
    ctx.progress(format!("wrote {} ({hash})", out.display()));
    Ok(())
}

fn cmd_augment(ctx: &Ctx, subspace: &Path, pseudo: usize, out: &Path) -> CliResult {
    let mut set = SubspaceSet::load(subspace)?;
    for sub in set.sites.values_mut() {
        *sub = augment_pseudo(sub, pseudo, ctx.seed)?;
    }
    let hash = set.save(out)?;
    ctx.progress(format!("wrote {} ({hash})", out.display()));
    Ok(())
}

fn cmd_project(
    ctx: &Ctx,
    subspace: &Path,
    adapter: &Path,
    include_mean: bool,
    out: &Path,
    report: Option<&Path>,
) -> CliResult {
    let set = SubspaceSet::load(subspace)?;
    let bundle = load_adapter_bundle(adapter)?;
    let mut coeffs = projection::project_adapter(&set, &bundle, include_mean)?;
    // Tie coefficients to the bundle on disk, byte for byte.
    coeffs.subspace_ref = projection::subspace_hash(subspace)?;
    coeffs.save(out)?;
    if let Some(path) = report {
        let mut csv = String::from("site_name,role,adapter_id,fro_residual,rel_residual\n");
        for (id, c) in &coeffs.sites {
            let sub = &set.sites[id];
            let w = bundle.sites[id].to_array::<f64>();
            let mut v = role_vectors(w.view(), id.role);
            if include_mean {
                v -= &sub.mean;
            }
            let denom = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            let fro = c.residual_fro;
            let rel = if denom < projection::REL_RESIDUAL_FLOOR { 0.0 } else { fro / denom };
            csv.push_str(&format!("{},{},{},{:?},{:?}\n", id.name, id.role, bundle.adapter_id, fro, rel));
        }
        write_file(path, &csv)?;
    }
    ctx.progress(format!("wrote {}", out.display()));
    Ok(())
}

fn cmd_reconstruct(ctx: &Ctx, subspace: &Path, coeffs: &Path, out: &Path) -> CliResult {
    let set = SubspaceSet::load(subspace)?;
    let hash = projection::subspace_hash(subspace)?;
    let coeffs = CoefficientSet::load(coeffs)?;
    let bundle = reconstruct_adapter(&set, &hash, &coeffs)?;
    save_adapter_bundle(&bundle, out)?;
    ctx.progress(format!("wrote {}", out.display()));
    Ok(())
}

fn cmd_report(ctx: &Ctx, subspace: &Path, adapters: &[PathBuf], out_dir: &Path) -> CliResult {
    let set = SubspaceSet::load(subspace)?;
    let bundles = load_bundles(adapters)?;
    let report = reconstruction_report(&set, &bundles)?;
    write_file(&out_dir.join("reconstruction.csv"), &report.to_csv())?;
    write_file(&out_dir.join("site_means.csv"), &report.site_means_csv())?;
    write_file(&out_dir.join("explained_variance.csv"), &variance_csv(&set)?)?;
    ctx.progress(format!("wrote reports to {}", out_dir.display()));
    Ok(())
}

fn thousands(v: u128) -> String {
    let digits = v.to_string();
    let mut out = String::with_capacity(digits.len() + digits.len() / 3);
    for (i, ch) in digits.chars().enumerate() {
        if i > 0 && (digits.len() - i) % 3 == 0 {
            out.push(',');
        }
        out.push(ch);
    }
    out
}

fn cmd_account(config: &Path, out: Option<&Path>) -> CliResult {
    let cfg: DeployConfig = read_json(config)?;
    let params = accounting::trainable_params(&cfg)?;
    let storage = accounting::storage_footprint(&cfg)?;
    let macs = accounting::adapter_flops_delta(&cfg, 1)?;

    println!("{:<20} {:>16} {:>16} {:>10}", "quantity", "lora", "elorax", "ratio");
    println!(
        "{:<20} {:>16} {:>16} {:>10}",
        "trainable_params",
        thousands(params.lora),
        thousands(params.elorax),
        format_ratio(&params.ratio)
    );
    println!(
        "{:<20} {:>16} {:>16} {:>10}",
        "stored_scalars",
        thousands(storage.lora_scalars),
        thousands(storage.elorax_scalars),
        format_ratio(&storage.ratio)
    );
    println!(
        "{:<20} {:>16} {:>16}",
        "stored_bytes",
        thousands(storage.lora_bytes),
        thousands(storage.elorax_bytes)
    );
    println!("{:<20} {:>16} {:>16}", "adapter_macs", thousands(macs.lora), thousands(macs.elorax));
    match storage.breakeven_d {
        Some(d) => println!("breakeven_d: {d}"),
        None => println!("breakeven_d: never"),
    }

    if let Some(path) = out {
        let json = serde_json::json!({
            "format_version": store::FORMAT_VERSION,
            "config": cfg,
            "trainable_params": params,
            "storage": storage,
            "adapter_macs": macs,
        });
        write_file(path, &(serde_json::to_string_pretty(&json).expect("json value") + "\n"))?;
    }
    Ok(())
}

fn cmd_simulate(ctx: &Ctx, config: &Path, protocol: Protocol, out: &Path) -> CliResult {
    let mut cfg: SimConfig = read_json(config)?;
    if let Some(seed) = ctx.seed_override {
        cfg.domain.seed = seed;
    }
    cfg.validate()?;
    let (metrics, extra): (SimMetrics, Option<(&str, String)>) = match protocol {
        Protocol::Loo => {
            ctx.progress(format!("leave-one-out over {} tasks", cfg.domain.d));
            let domain = domain_sim::generate_domain::<f64>(&cfg.domain)?;
            let m = domain_sim::run_leave_one_out(&domain, cfg.k_policy, cfg.domain.r, cfg.ridge, &cfg.train)?;
            (m, None)
        }
        Protocol::Lowres => {
            let params = cfg
                .low_resource
                .ok_or_else(|| input_error("config has no low_resource section"))?;
            ctx.progress("low-resource augmentation");
            let domain = domain_sim::generate_domain::<f64>(&cfg.domain)?;
            (domain_sim::run_low_resource(&domain, params, cfg.ridge, &cfg.train)?, None)
        }
        Protocol::Trends => {
            let params = cfg
                .trends
                .as_ref()
                .ok_or_else(|| input_error("config has no trends section"))?;
            ctx.progress(format!("trend sweep over {} seeds", params.seeds.len()));
            let table = domain_sim::trend_curves::<f64>(&cfg.domain, params, cfg.ridge)?;
            (table.to_metrics(), Some(("trends.csv", table.to_csv())))
        }
    };
    for flag in &metrics.flags {
        ctx.progress(format!("note: {flag}"));
    }
    let json_path = out.join("metrics.json");
    write_file(&json_path, &metrics.to_json())?;
    write_file(&out.join("metrics.csv"), &metrics.to_csv())?;
    if let Some((name, body)) = extra {
        write_file(&out.join(name), &body)?;
    }
    println!("{}", json_path.display());
    Ok(())
}

fn configure_threads() {
    if let Some(n) = std::env::var("ELORAX_THREADS").ok().and_then(|v| v.parse::<usize>().ok()) {
        if n > 0 {
            let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
        }
    }
}

fn run(cli: Cli) -> CliResult {
    let ctx = Ctx {
        seed: cli.seed.unwrap_or(0),
        seed_override: cli.seed,
        quiet: cli.quiet,
    };
    match cli.command {
        Command::Extract { adapters, k, variance, pseudo, svd, out } => {
            let policy = match (k, variance) {
                (Some(k), _) => KPolicy::FixedK(k),
                (None, Some(t)) => KPolicy::VarianceThreshold(t),
                (None, None) => unreachable!("clap enforces the policy group"),
            };
            cmd_extract(&ctx, &adapters, policy, pseudo, svd.into(), &out)
        }
        Command::Augment { subspace, pseudo, out } => cmd_augment(&ctx, &subspace, pseudo, &out),
        Command::Project { subspace, adapter, include_mean, out, report } => {
            cmd_project(&ctx, &subspace, &adapter, include_mean, &out, report.as_deref())
        }
        Command::Reconstruct { subspace, coeffs, out } => cmd_reconstruct(&ctx, &subspace, &coeffs, &out),
        Command::Report { subspace, adapters, out_dir } => cmd_report(&ctx, &subspace, &adapters, &out_dir),
        Command::Account { config, out } => cmd_account(&config, out.as_deref()),
        Command::Simulate { config, protocol, out } => cmd_simulate(&ctx, &config, protocol, &out),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    configure_threads();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
