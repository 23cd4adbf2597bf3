use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::time::Duration;

use serde_json::{json, Value};
use vecap_core::eval::{eval_report, EvalInputs};
use vecap_core::llmclient::{LlmClient, RetryPolicy};
use vecap_core::loss::{
    sampler_picker, synthetic_pairs, train_toy, LossError, PairedFeatures, Reduction, TextVariant,
    TrainConfig,
};
use vecap_core::mockllm::{MockScript, MockServer};
use vecap_core::recaption::{
    recaption_shard, Endpoints, RecaptionConfig, RecaptionError, ShardOptions,
};
use vecap_core::sampler::{AltTextMode, Resample, Sampler, SamplerConfig, Scheme};
use vecap_core::shardio::{open_records, read_embeddings, read_records};
use vecap_core::Flag;

use crate::args::*;
use crate::CliError;

pub const TOKEN_ENV: &str = "VECAP_LLM_TOKEN";

fn print_json(v: &impl serde::Serialize) -> Result<(), CliError> {
    let mut out = std::io::stdout().lock();
    serde_json::to_writer_pretty(&mut out, v).map_err(|e| CliError::io(e.to_string()))?;
    writeln!(out).map_err(|e| CliError::io(e.to_string()))
}

impl From<SchemeArg> for Scheme {
    fn from(s: SchemeArg) -> Self {
        match s {
            SchemeArg::Alttext => Scheme::AltText,
            SchemeArg::Vecap => Scheme::VeCap,
            SchemeArg::Mixed => Scheme::Mixed,
            SchemeArg::Ser => Scheme::Ser,
        }
    }
}

impl From<ResampleArg> for Resample {
    fn from(r: ResampleArg) -> Self {
        match r {
            ResampleArg::PerEpoch => Resample::PerEpoch,
            ResampleArg::PerStep => Resample::PerStep,
        }
    }
}

pub async fn recaption(args: RecaptionArgs) -> Result<(), CliError> {
    let policy = RetryPolicy {
        max_attempts: args.max_attempts,
        base_backoff: Duration::from_millis(args.base_backoff_ms),
        max_backoff: Duration::from_millis(args.max_backoff_ms),
        timeout: Duration::from_secs(args.timeout_secs),
    };
    let mut client = LlmClient::new(policy).map_err(|e| CliError::usage(e.to_string()))?;
    if let Ok(token) = std::env::var(TOKEN_ENV) {
        client = client.with_bearer_token(token);
    }
    let cfg = RecaptionConfig {
        max_alttext_chars: args.max_alt_chars,
        ..RecaptionConfig::default()
    };
    let cancel = Arc::new(AtomicBool::new(false));
    let flag = cancel.clone();
    tokio::spawn(async move {
        if tokio::signal::ctrl_c().await.is_ok() {
            log::warn!("interrupt received; closing output as partial");
            flag.store(true, Ordering::SeqCst);
        }
    });
    let opts = ShardOptions {
        batch_size: args.batch_size,
        workers: args.workers,
        chunk_records: args.chunk_records,
        cancel: Some(cancel),
    };
    let endpoints = Endpoints {
        captioner: args.captioner_url,
        fuser: args.fuser_url,
    };
    match recaption_shard(&args.input, &args.output, &cfg, &endpoints, &client, &opts).await {
        Ok(stats) => print_json(&stats),
        Err(RecaptionError::Config(m)) => Err(CliError::usage(m)),
        Err(e @ RecaptionError::Interrupted { .. }) => Err(CliError::interrupted(e.to_string())),
        Err(e) => Err(CliError::io(e.to_string())),
    }
}

pub fn sample(args: SampleArgs, seed: u64) -> Result<(), CliError> {
    let sampler = Sampler::new(SamplerConfig {
        alttext_mode: match args.mode {
            ModeArg::Hcs => AltTextMode::Hcs,
            ModeArg::Random => AltTextMode::Random,
        },
        scheme: args.scheme.into(),
        seed,
        resample: args.resample.into(),
    });
    let reader = open_records(&args.input).map_err(|e| CliError::io(e.to_string()))?;
    let mut out = std::io::BufWriter::new(std::io::stdout().lock());
    for rec in reader {
        let rec = rec.map_err(|e| CliError::io(e.to_string()))?;
        let choice = sampler
            .choose(&rec, args.epoch, args.step)
            .map_err(|e| CliError::io(format!("record {:?}: {e}", rec.record_id)))?;
        let mut line = json!({
            "record_id": rec.record_id,
            "text": choice.text,
            "source": choice.source,
        });
        if let Some(i) = choice.alt_index {
            line["alt_index"] = i.into();
        }
        writeln!(out, "{line}").map_err(|e| CliError::io(e.to_string()))?;
    }
    out.flush().map_err(|e| CliError::io(e.to_string()))
}

fn load_features(args: &TrainToyArgs, seed: u64) -> Result<PairedFeatures, CliError> {
    let Some(image_path) = &args.image_features else {
        return Ok(synthetic_pairs(
            args.pairs,
            args.feature_dim,
            args.alt_noise,
            args.vecap_noise,
            seed,
        ));
    };
    let load = |p: &Path| {
        read_embeddings(p)
            .map(|m| m.to_f64())
            .map_err(|e| CliError::io(format!("{}: {e}", p.display())))
    };
    let image = load(image_path)?;
    let alt = load(
        args.alt_features
            .as_deref()
            .expect("clap enforces --alt-features"),
    )?;
    let vecap = args.vecap_features.as_deref().map(load).transpose()?;
    PairedFeatures::new(image, alt, vecap).map_err(|e| CliError::io(e.to_string()))
}

pub fn train_toy_cmd(args: TrainToyArgs, seed: u64) -> Result<(), CliError> {
    let data = load_features(&args, seed)?;
    if args.holdout >= data.len() {
        return Err(CliError::usage(format!(
            "--holdout {} leaves no training pairs out of {}",
            args.holdout,
            data.len()
        )));
    }
    let (train, held) = data.split_at(data.len() - args.holdout);
    let cfg = TrainConfig {
        lr: args.lr,
        weight_decay: args.weight_decay,
        warmup_steps: args.warmup,
        total_steps: args.steps,
        batch_size: args.batch_size,
        seed,
        embed_dim: args.embed_dim,
        init_tau: args.init_tau,
        min_tau: (args.min_tau > 0.0).then_some(args.min_tau),
        learn_tau: !args.fixed_tau,
        reduction: match args.loss_reduction {
            ReductionArg::Mean => Reduction::Mean,
            ReductionArg::Sum => Reduction::Sum,
        },
        aug_sigma: args.aug_sigma,
        ..TrainConfig::default()
    };
    let picker = sampler_picker(
        SamplerConfig {
            scheme: args.scheme.into(),
            seed,
            resample: args.resample.into(),
            ..SamplerConfig::default()
        },
        train.len(),
    );
    let outcome = match train_toy(&train, &cfg, &picker) {
        Ok(o) => o,
        Err(e @ LossError::DivergenceDetected { .. }) => {
            return Err(CliError::divergence(e.to_string()))
        }
        Err(e) => return Err(CliError::usage(e.to_string())),
    };
    if let Some(path) = &args.history {
        std::fs::write(path, outcome.history_csv())
            .map_err(|e| CliError::io(format!("{}: {e}", path.display())))?;
    }

    let mut heldout = BTreeMap::new();
    if !held.is_empty() {
        let r1 = |v| {
            outcome
                .model
                .recall_at_1(&held, v)
                .map_err(|e| CliError::divergence(e.to_string()))
        };
        heldout.insert("alttext", r1(TextVariant::AltText)?);
        if held.vecap_text.is_some() {
            heldout.insert("vecap", r1(TextVariant::VeCap)?);
        }
    }
    let last = outcome.history.last();
    print_json(&json!({
        "steps": outcome.history.len(),
        "train_pairs": train.len(),
        "heldout_pairs": held.len(),
        "first_loss": outcome.history.first().map(|h| h.loss),
        "final_loss": last.map(|h| h.loss),
        "final_tau": outcome.model.tau(),
        "heldout_r1": heldout,
    }))
}

pub fn eval(args: EvalArgs) -> Result<(), CliError> {
    let inputs = EvalInputs {
        images: args.images,
        texts: args.texts,
        ground_truth: args.gt,
        classes: args.classes,
        templates_per_class: args.templates_per_class,
        labels: args.labels,
        map_labels: args.map_labels,
        ks: args.ks,
    };
    let report = eval_report(&inputs).map_err(|e| CliError::io(e.to_string()))?;
    match args.format {
        FormatArg::Json => print_json(&report),
        FormatArg::Table => {
            print!("{report}");
            Ok(())
        }
    }
}

const BUCKETS: [usize; 6] = [0, 20, 50, 100, 200, 300];

fn histogram(lengths: impl Iterator<Item = usize>) -> Vec<Value> {
    let mut counts = [0usize; BUCKETS.len()];
    for len in lengths {
        let b = BUCKETS.iter().rposition(|&lo| len >= lo).unwrap_or(0);
        counts[b] += 1;
    }
    BUCKETS
        .iter()
        .zip(counts)
        .enumerate()
        .map(|(i, (&lo, count))| {
            let hi = BUCKETS.get(i + 1).map(|h| h - 1);
            json!({ "min_chars": lo, "max_chars": hi, "count": count })
        })
        .collect()
}

pub fn stats(args: StatsArgs) -> Result<(), CliError> {
    let shard = read_records(&args.input).map_err(|e| CliError::io(e.to_string()))?;
    let recs = &shard.records;
    let chars = |s: &str| s.chars().count();
    let flag_count = |f: Flag| recs.iter().filter(|r| r.has_flag(f)).count();
    let alts = || recs.iter().flat_map(|r| r.alt_texts.iter());
    let mut flags = BTreeMap::new();
    for f in [
        Flag::RefusalFallback,
        Flag::AlttextTruncated,
        Flag::PipelineFailed,
    ] {
        flags.insert(f.as_str(), flag_count(f));
    }
    print_json(&json!({
        "records": recs.len(),
        "alt_texts": alts().count(),
        "with_vec": recs.iter().filter(|r| r.vec.is_some()).count(),
        "with_vecap": recs.iter().filter(|r| r.vecap.is_some()).count(),
        "refusals": flag_count(Flag::RefusalFallback),
        "truncations": flag_count(Flag::AlttextTruncated),
        "failed": flag_count(Flag::PipelineFailed),
        "flags": flags,
        "max_alt_chars": args.max_alt_chars,
        "alttexts_over_limit": alts().filter(|a| chars(a) > args.max_alt_chars).count(),
        "alt_text_chars": histogram(alts().map(|a| chars(a))),
        "vecap_chars": histogram(recs.iter().filter_map(|r| r.vecap.as_deref()).map(chars)),
        "malformed_lines": shard.malformed.len(),
        "corrupt": shard.corrupt,
    }))
}

pub async fn mock_serve(args: MockServeArgs) -> Result<(), CliError> {
    let script = match &args.script {
        Some(p) => MockScript::from_file(p).map_err(|e| CliError::io(e.to_string()))?,
        None => MockScript::echo(),
    };
    let server = MockServer::serve(script, args.port)
        .await
        .map_err(|e| CliError::io(e.to_string()))?;
    println!("{}", json!({ "url": server.url().as_str() }));
    log::info!("mock server listening on {}", server.addr());
    tokio::signal::ctrl_c()
        .await
        .map_err(|e| CliError::io(e.to_string()))?;
    server.shutdown().await;
    Ok(())
}
