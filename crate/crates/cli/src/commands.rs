// SPDX-License-Identifier: Apache-2.0

use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::net::TcpListener;
use std::path::Path;
use std::time::{Duration, SystemTime, UNIX_EPOCH};

use anyhow::{Context, Result};
use pct_core::chunking::{
    build_within_budget, encode_points, normalize_keys, ChunkedDictionary, ChunkingError,
    ContactRules, Manifest,
};
use pct_core::datagen::{self, BoundingBox, Dataset, GeneratorConfig};
use pct_core::enclave_sim::{run_end_to_end, EnclaveBudget, EndToEndReport, TrustedRegion};
use pct_core::encoding::EncodingParams;
use pct_core::oracle::{self, ExactThresholds};
use pct_core::psi::{client_id_from_u64, Mode, PsiConfig, Query};

use crate::cli::{
    BenchArgs, BuildArgs, ClientArgs, EncodingArgs, EvalArgs, GenArgs, QueryArgs, RunArgs,
    ServeArgs,
};
use crate::service::{self, ClientOutcome, ErrorCode, ServiceConfig};
use crate::Invalid;

const DAY: i64 = 86_400;

pub fn now_unix() -> i64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map_or(0, |d| d.as_secs() as i64)
}

fn min_time<'a>(sets: impl IntoIterator<Item = &'a Dataset>) -> Option<i64> {
    sets.into_iter()
        .flat_map(|d| d.iter().flat_map(|u| u.points.iter().map(|p| p.t)))
        .min()
}

/// Parameters from flags, defaulting the period to start at the first
/// timestamp's UTC midnight.
pub fn resolve_params(enc: &EncodingArgs, first_t: Option<i64>) -> Result<EncodingParams> {
    let t_start = match (enc.t_start, first_t) {
        (Some(t), _) => t,
        (None, Some(t)) => t.div_euclid(DAY) * DAY,
        (None, None) => {
            return Err(Invalid("--t-start is required for an empty dataset".into()).into())
        }
    };
    let t_end = enc.t_end.unwrap_or(t_start + enc.period_days * DAY);
    Ok(EncodingParams::new(
        enc.theta_geo,
        enc.theta_time,
        t_start,
        t_end,
        enc.mix_mode,
    )?)
}

fn read_dataset(path: &Path) -> Result<Dataset> {
    datagen::read_csv(path).with_context(|| format!("reading {}", path.display()))
}

/// One query per user, client id derived from the user id.
pub fn encode_queries(dataset: &Dataset, params: &EncodingParams) -> Result<Vec<Query>> {
    dataset
        .iter()
        .map(|u| {
            let values =
                encode_points(&u.points, params).with_context(|| format!("user {}", u.user_id))?;
            Ok(Query {
                client_id: client_id_from_u64(u.user_id),
                values,
            })
        })
        .collect()
}

fn server_keys(
    dataset: &Dataset,
    params: &EncodingParams,
) -> Result<Vec<pct_core::encoding::TrajectoryHashValue>> {
    let mut keys = Vec::new();
    for u in dataset {
        keys.extend(
            encode_points(&u.points, params).with_context(|| format!("user {}", u.user_id))?,
        );
    }
    Ok(normalize_keys(keys))
}

fn out_writer(path: Option<&Path>) -> Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(
            File::create(p).with_context(|| format!("creating {}", p.display()))?,
        )),
        None => Box::new(io::stdout().lock()),
    })
}

pub fn budget(bytes: Option<u64>) -> EnclaveBudget {
    bytes.map_or_else(EnclaveBudget::default, EnclaveBudget::new)
}

pub fn region(run: &RunArgs) -> TrustedRegion {
    match run.seed {
        Some(s) => TrustedRegion::with_seed(s, budget(run.budget_bytes)),
        None => TrustedRegion::new(budget(run.budget_bytes)),
    }
}

pub fn psi_config(run: &RunArgs, rules: &ContactRules) -> PsiConfig {
    PsiConfig {
        constant_scan: !run.no_constant_scan,
        theta_doe_s: run.theta_doe.unwrap_or(rules.theta_doe_s),
        sampling_interval_s: rules.sampling_interval_s,
    }
}

pub fn cmd_gen(a: &GenArgs) -> Result<()> {
    let bbox = match a.bbox.as_deref() {
        None => BoundingBox::MANHATTAN,
        Some(&[min_lat, max_lat, min_lng, max_lng]) => BoundingBox {
            min_lat,
            max_lat,
            min_lng,
            max_lng,
        },
        Some(_) => return Err(Invalid("--bbox takes four numbers".into()).into()),
    };
    let cfg = GeneratorConfig {
        n_users: a.users,
        duration_s: (a.days * DAY as f64).round() as i64,
        sampling_interval_s: a.interval,
        t_start: a.t_start,
        bbox,
        n_hotspots: a.hotspots,
        stickiness: a.stickiness,
        first_user_id: a.first_user_id,
        seed: a.seed,
        ..GeneratorConfig::default()
    };
    let data = datagen::generate(&cfg)?;
    datagen::write_csv(&data, &a.out).with_context(|| format!("writing {}", a.out.display()))?;
    eprintln!(
        "wrote {} users x {} points to {}",
        data.len(),
        cfg.points_per_user(),
        a.out.display()
    );
    Ok(())
}

pub fn cmd_build(a: &BuildArgs) -> Result<()> {
    let data = read_dataset(&a.input)?;
    let params = resolve_params(&a.encoding, min_time([&data]))?;
    if a.sampling_interval == 0 {
        return Err(Invalid("--sampling-interval must be positive".into()).into());
    }
    let keys = server_keys(&data, &params)?;
    drop(data);
    if keys.is_empty() {
        return Err(ChunkingError::EmptyDataset.into());
    }
    let dict = match a.n_chunks {
        Some(n) => ChunkedDictionary::from_sorted_keys(params, keys, n)?,
        None => {
            let budget = budget(a.budget_bytes).capacity_bytes;
            let (dict, plan) = build_within_budget(params, keys, budget, a.reserved_bytes)?;
            eprintln!(
                "planned {} chunks at {:.3} bytes/key for {} byte chunks",
                plan.n_chunks, plan.bytes_per_key, plan.chunk_limit_bytes
            );
            dict
        }
    };
    let rules = ContactRules {
        theta_doe_s: a.theta_doe,
        sampling_interval_s: a.sampling_interval,
    };
    let path = dict.save(&a.out, &rules)?;
    println!("manifest {}", path.display());
    println!("keys {}", dict.key_count());
    println!("chunks {}", dict.n_chunks());
    println!("hash_width {}", params.hash_width());
    println!("total_bytes {}", dict.total_bytes());
    println!("max_chunk_bytes {}", dict.max_chunk_bytes());
    Ok(())
}

pub fn format_report(r: &EndToEndReport, mode: Mode, values: u64) -> String {
    let mut s = String::new();
    let secs = |d: std::time::Duration| d.as_secs_f64();
    s += &format!(
        "mode {mode}\nclients {}\nvalues {values}\nbatches {}\n",
        r.results.len(),
        r.batches
    );
    s += &format!(
        "positives {}\nrejected {}\n",
        r.positives(),
        r.rejected.len()
    );
    s += &format!("phase client_encrypt {:.6} s\n", secs(r.client_encrypt));
    for (name, d) in r.timings.phases() {
        s += &format!("phase {name} {:.6} s\n", secs(d));
    }
    s += &format!("phase client_decrypt {:.6} s\n", secs(r.client_decrypt));
    s += &format!("probes {}\n", r.probes);
    s += &format!("ecalls_per_batch {}\n", r.max_batch_ecalls);
    s += &format!(
        "peak_resident_bytes {} capacity_bytes {} spill_bytes {}\n",
        r.peak_resident_bytes,
        r.capacity_bytes,
        r.page_spill_bytes()
    );
    s += &format!("wall {:.6} s\n", secs(r.wall));
    s
}

pub fn write_results<W: Write>(mut w: W, users: &[u64], r: &EndToEndReport) -> Result<()> {
    writeln!(w, "user_id,positive")?;
    for (u, (_, res)) in users.iter().zip(&r.results) {
        let v = match res {
            Some(true) => "1",
            Some(false) => "0",
            None => "",
        };
        writeln!(w, "{u},{v}")?;
    }
    w.flush()?;
    Ok(())
}

pub fn cmd_query(a: &QueryArgs) -> Result<()> {
    let (dict, manifest) = ChunkedDictionary::load(&a.manifest)?;
    let params = *dict.params();
    let cfg = psi_config(&a.run, &manifest.rules);
    let mut region = region(&a.run);
    let sealed = region.seal_dictionary(&dict)?;
    drop(dict);
    let clients = read_dataset(&a.clients)?;
    let queries = encode_queries(&clients, &params)?;
    let users: Vec<u64> = clients.iter().map(|u| u.user_id).collect();
    drop(clients);
    let values = queries.iter().map(|q| q.values.len() as u64).sum();
    let report = run_end_to_end(
        &mut region,
        &sealed,
        &queries,
        a.run.mode,
        cfg,
        a.batch_size,
        now_unix(),
    )?;
    eprint!("{}", format_report(&report, a.run.mode, values));
    write_results(out_writer(a.out.as_deref())?, &users, &report)
}

pub fn cmd_eval(a: &EvalArgs) -> Result<()> {
    let server = read_dataset(&a.server)?;
    let clients = read_dataset(&a.clients)?;
    let (params, rules) = match &a.manifest {
        Some(m) => {
            let m = Manifest::read(m)?;
            (m.params, m.rules)
        }
        None => (
            resolve_params(&a.encoding, min_time([&server, &clients]))?,
            ContactRules::default(),
        ),
    };
    let th = ExactThresholds {
        theta_geo_cells: a.theta_geo_cells,
        theta_time_s: a.theta_time_s.unwrap_or(params.time_cell_seconds() as f64),
        theta_doe_s: a.theta_doe.unwrap_or(rules.theta_doe_s),
        sampling_interval_s: a.sampling_interval.unwrap_or(rules.sampling_interval_s),
    };
    if !(th.theta_geo_cells >= 0.0 && th.theta_time_s >= 0.0) || th.sampling_interval_s == 0 {
        return Err(Invalid(
            "thresholds must be non-negative and the sampling interval positive".into(),
        )
        .into());
    }
    let server_points = datagen::flatten(&server);
    drop(server);
    let e = oracle::evaluate(&clients, &server_points, &params, &th, a.mode)?;
    print!("{}", oracle::report_text(&e));
    if let Some(prefix) = &a.report_csv {
        let with = |suffix: &str| {
            let mut name = prefix.as_os_str().to_owned();
            name.push(suffix);
            std::path::PathBuf::from(name)
        };
        oracle::write_matrix_csv(&e, File::create(with("_matrix.csv"))?)?;
        oracle::write_false_cases_csv(&e, File::create(with("_false_cases.csv"))?)?;
        oracle::write_histograms_csv(&e, File::create(with("_histograms.csv"))?)?;
    }
    Ok(())
}

fn parse_param_pair(s: &str) -> Result<(u8, u8)> {
    let bad = || Invalid(format!("expected theta_geo:theta_time, got {s:?}"));
    let (g, t) = s.split_once(':').ok_or_else(bad)?;
    Ok((
        g.trim().parse().map_err(|_| bad())?,
        t.trim().parse().map_err(|_| bad())?,
    ))
}

pub const BENCH_HEADER: &str = "theta_geo,theta_time,mode,n_chunks,clients,values,server_keys,client_encrypt_s,query_upload_s,query_decrypt_s,server_decrypt_s,intersection_s,respond_s,wall_s,probes,ecalls_per_batch,peak_resident_bytes,spill_bytes,positives";

pub fn cmd_bench(a: &BenchArgs) -> Result<()> {
    let pairs = a
        .params
        .iter()
        .map(|s| parse_param_pair(s))
        .collect::<Result<Vec<_>>>()?;
    if a.n_chunks.contains(&0) || a.client_counts.is_empty() {
        return Err(Invalid(
            "chunk counts must be positive and at least one client count given".into(),
        )
        .into());
    }
    let max_clients = *a.client_counts.iter().max().unwrap();
    let base = GeneratorConfig {
        duration_s: (a.days * DAY as f64).round() as i64,
        seed: a.seed,
        ..GeneratorConfig::default()
    };
    let server = match &a.server {
        Some(p) => read_dataset(p)?,
        None => datagen::generate(&GeneratorConfig {
            n_users: a.server_users,
            ..base.clone()
        })?,
    };
    let clients = match &a.clients {
        Some(p) => read_dataset(p)?,
        None => datagen::generate(&GeneratorConfig {
            n_users: max_clients,
            first_user_id: 1 << 32,
            ..base
        })?,
    };
    let first_t = min_time([&server, &clients]);
    let mut out = out_writer(a.out.as_deref())?;
    writeln!(out, "{BENCH_HEADER}")?;
    for (g, t) in pairs {
        let enc = EncodingArgs {
            theta_geo: g,
            theta_time: t,
            t_start: None,
            t_end: None,
            period_days: 14,
            mix_mode: a.mix_mode,
        };
        let params = resolve_params(&enc, first_t)?;
        let keys = server_keys(&server, &params)?;
        let queries = encode_queries(&clients, &params)?;
        for &n in &a.n_chunks {
            let dict = ChunkedDictionary::from_sorted_keys(params, keys.clone(), n)?;
            let mut region = TrustedRegion::with_seed(a.seed, budget(a.budget_bytes));
            let sealed = region.seal_dictionary(&dict)?;
            drop(dict);
            for &mode in &a.modes {
                for &c in &a.client_counts {
                    let qs = &queries[..c.min(queries.len())];
                    let cfg = PsiConfig {
                        theta_doe_s: a.theta_doe,
                        ..PsiConfig::default()
                    };
                    let r = run_end_to_end(
                        &mut region,
                        &sealed,
                        qs,
                        mode,
                        cfg,
                        a.batch_size,
                        now_unix(),
                    )?;
                    let values: u64 = qs.iter().map(|q| q.values.len() as u64).sum();
                    let s = |d: std::time::Duration| format!("{:.6}", d.as_secs_f64());
                    writeln!(
                        out,
                        "{g},{t},{mode},{n},{},{values},{},{},{},{},{},{},{},{},{},{},{},{},{}",
                        qs.len(),
                        keys.len(),
                        s(r.client_encrypt),
                        s(r.timings.query_upload),
                        s(r.timings.query_decrypt),
                        s(r.timings.server_decrypt),
                        s(r.timings.intersection),
                        s(r.timings.respond),
                        s(r.wall),
                        r.probes,
                        r.max_batch_ecalls,
                        r.peak_resident_bytes,
                        r.page_spill_bytes(),
                        r.positives()
                    )?;
                    out.flush()?;
                }
            }
        }
    }
    Ok(())
}

pub fn cmd_serve(a: &ServeArgs) -> Result<()> {
    let (dict, manifest) = ChunkedDictionary::load(&a.manifest)?;
    let mut region = region(&a.run);
    let sealed = region.seal_dictionary(&dict)?;
    drop(dict);
    let cfg = ServiceConfig {
        batch_size: a.batch_size,
        batch_timeout: Duration::from_millis(a.batch_timeout_ms),
        rate_limit: a.rate_limit,
        mode: a.run.mode,
        psi: psi_config(&a.run, &manifest.rules),
        max_batches: a.max_batches,
    };
    let listener = TcpListener::bind(a.listen).with_context(|| format!("binding {}", a.listen))?;
    println!("listening on {}", listener.local_addr()?);
    io::stdout().flush()?;
    let stats = service::serve(listener, region, sealed, cfg)?;
    eprintln!("served {} batches", stats.batch_sizes.len());
    Ok(())
}

pub fn cmd_client(a: &ClientArgs) -> Result<()> {
    let clients = read_dataset(&a.clients)?;
    let selected: Vec<_> = clients
        .iter()
        .filter(|u| a.users.is_empty() || a.users.contains(&u.user_id))
        .collect();
    let timeout = Duration::from_millis(a.timeout_ms);
    let outcomes: Vec<Result<ClientOutcome>> = std::thread::scope(|s| {
        let handles: Vec<_> = selected
            .iter()
            .map(|u| {
                s.spawn(move || {
                    service::query_once(a.server, client_id_from_u64(u.user_id), &u.points, timeout)
                })
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("client thread panicked"))
            .collect()
    });
    let mut w = out_writer(a.out.as_deref())?;
    writeln!(w, "user_id,positive,error")?;
    let mut failures = 0;
    for (u, o) in selected.iter().zip(outcomes) {
        match o {
            Ok(ClientOutcome::Answer(p)) => writeln!(w, "{},{},", u.user_id, u8::from(p))?,
            Ok(ClientOutcome::Refused { code, message }) => {
                let name = ErrorCode::from_u8(code).map_or("unknown", ErrorCode::as_str);
                eprintln!("user {}: refused ({name}): {message}", u.user_id);
                writeln!(w, "{},,{name}", u.user_id)?;
            }
            Err(e) => {
                failures += 1;
                eprintln!("user {}: {e:#}", u.user_id);
                writeln!(w, "{},,transport", u.user_id)?;
            }
        }
    }
    w.flush()?;
    if failures > 0 {
        anyhow::bail!("{failures} of {} requests failed", selected.len());
    }
    Ok(())
}
