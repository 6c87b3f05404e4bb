use std::collections::{BTreeMap, HashMap};
use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::Path;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use dgt_core::corpus::{
    districts_of, load_predictions, write_corpus, write_predictions, ColumnStats,
};
use dgt_core::synth::{generate_synthetic_corpus, RuleSet, SyntheticConfig};
use dgt_core::{
    batch_decode, compute_stats, corpus_wer, load_corpus, split_train_val, Checkpoint, Error,
    Trainer, WerBreakdown,
};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use crate::{EvalArgs, InferArgs, StatsArgs, SynthArgs, TrainArgs};

/// Exit status for runs that finished but had row-level failures.
const PARTIAL_FAILURE: u8 = 2;

fn column_lines(name: &str, c: &ColumnStats) -> String {
    let l = &c.lengths;
    format!(
        "{name:<14} max {:>5}  min {:>4}  mean {:>8.2}  median {:>6.1}  unique words {}\n",
        l.max, l.min, l.mean, l.median, c.unique_words
    )
}

pub fn stats(a: &StatsArgs) -> Result<ExitCode> {
    let train = load_corpus(&a.train, false)?;
    let test = a.test.as_ref().map(|p| load_corpus(p, false)).transpose()?;
    let stats = compute_stats(&train, test.as_deref())?;
    if a.json {
        println!("{}", serde_json::to_string_pretty(&stats)?);
        return Ok(ExitCode::SUCCESS);
    }
    let mut out = format!("train rows {}\n", stats.rows);
    out += &column_lines("contents", &stats.contents);
    if let Some(ipa) = &stats.ipa {
        out += &column_lines("ipa", ipa);
    }
    if let Some(t) = &stats.test {
        out += &format!("test rows {}\n", t.rows);
        out += &column_lines("test contents", &t.contents);
        out += &format!(
            "oov words {} of {} ({:.2}%)\n",
            t.oov_count,
            t.contents.unique_words,
            t.oov_rate * 100.0
        );
    }
    print!("{out}");
    Ok(ExitCode::SUCCESS)
}

pub fn synth(a: &SynthArgs) -> Result<ExitCode> {
    let run = a.run.resolve()?;
    let config = SyntheticConfig {
        districts: a.districts.clone(),
        n_per_district: a.per_district,
        min_len: a.min_len,
        max_len: a.max_len,
        require_ambiguous: a.require_ambiguous,
        seed: run.train.seed,
    };
    let corpus = generate_synthetic_corpus(&RuleSet::demo(), &config)?;
    write_corpus(&a.out, &corpus.examples, true)?;
    println!(
        "wrote {} rows to {}; district-blind accuracy ceiling {:.2}% (WER floor {:.2}%)",
        corpus.examples.len(),
        a.out.display(),
        corpus.ambiguity_floor * 100.0,
        corpus.floor_wer()
    );
    Ok(ExitCode::SUCCESS)
}

fn io_error(path: &Path, source: std::io::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

pub fn train(a: &TrainArgs) -> Result<ExitCode> {
    let config = a.run.resolve()?;
    let examples = load_corpus(&a.train, true)?;
    fs::create_dir_all(&a.out_dir).with_context(|| format!("creating {}", a.out_dir.display()))?;
    let run_log = format!(
        "dgt {}\ncommand = train\ntrain_file = {}\nresume = {}\n{}",
        env!("CARGO_PKG_VERSION"),
        a.train.display(),
        a.resume
            .as_ref()
            .map_or("none".to_string(), |p| p.display().to_string()),
        config.render()
    );
    fs::write(a.out_dir.join("run.log"), run_log)?;
    fs::write(a.out_dir.join("config.txt"), config.render())?;

    let (train_set, val_set) =
        split_train_val(&examples, config.train.val_fraction, config.train.seed)?;
    log::info!(
        "{} training rows, {} validation rows",
        train_set.len(),
        val_set.len()
    );
    let mut trainer = match &a.resume {
        Some(path) => Trainer::resume(Checkpoint::load(path)?, config.train.clone())?,
        None => Trainer::new(
            config.model.clone(),
            config.train.clone(),
            &districts_of(&examples),
        )?,
    };
    log::info!(
        "{} parameters, vocabulary {} ids",
        trainer.model().param_count(),
        trainer.vocab().size()
    );

    let metrics_path = a.out_dir.join("metrics.jsonl");
    let mut metrics = OpenOptions::new()
        .create(true)
        .write(true)
        .append(a.resume.is_some())
        .truncate(a.resume.is_none())
        .open(&metrics_path)?;
    let last_path = a.out_dir.join("last.dgt");
    let best_path = a.out_dir.join("best.dgt");
    let log = trainer.fit(&train_set, &val_set, |record, t| {
        writeln!(metrics, "{}", record.to_json_line()).map_err(|e| io_error(&metrics_path, e))?;
        t.checkpoint()?.save(&last_path)?;
        if record.best {
            t.best_checkpoint()?.save(&best_path)?;
        }
        Ok(())
    })?;
    if !best_path.exists() {
        trainer.best_checkpoint()?.save(&best_path)?;
    }
    let state = trainer.state();
    println!(
        "trained {} epochs ({} steps); best validation WER {} at epoch {}; checkpoint {}",
        log.len(),
        trainer.step_count(),
        state
            .best_val_wer
            .map_or("n/a".into(), |w| format!("{w:.2}%")),
        state.best_epoch.map_or("n/a".into(), |e| e.to_string()),
        best_path.display()
    );
    Ok(ExitCode::SUCCESS)
}

pub fn infer(a: &InferArgs) -> Result<ExitCode> {
    let config = a.run.resolve()?;
    let ck = Checkpoint::load(&a.checkpoint)?;
    let rows = load_corpus(&a.input, false)?;
    let conditioned = !ck.vocab.districts().is_empty();
    let inputs: Vec<(&str, Option<&str>)> = rows
        .iter()
        .map(|e| {
            (
                e.contents.as_str(),
                conditioned.then_some(e.district.as_str()),
            )
        })
        .collect();
    let results = batch_decode(&ck.model, &ck.vocab, &inputs, &config.decode());
    let mut failures = 0;
    let mut out = Vec::with_capacity(rows.len());
    for (n, (row, result)) in rows.iter().zip(results).enumerate() {
        match result {
            Ok(ipa) => out.push((row.index, ipa)),
            Err(e) => {
                failures += 1;
                eprintln!("row {} (index {}): {e}", n + 1, row.index);
                out.push((row.index, String::new()));
            }
        }
    }
    write_predictions(&a.output, &out)?;
    println!(
        "wrote {} predictions to {} ({failures} failed)",
        out.len(),
        a.output.display()
    );
    Ok(if failures == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(PARTIAL_FAILURE)
    })
}

fn score(pairs: &[(&str, &str)]) -> Result<WerBreakdown> {
    Ok(corpus_wer(pairs.iter().copied())?)
}

pub fn eval(a: &EvalArgs) -> Result<ExitCode> {
    let run = a.run.resolve()?;
    let predictions = load_predictions(&a.predictions)?;
    let mut references = load_corpus(&a.references, true)?;
    references.sort_by_key(|e| e.index);

    let by_index: HashMap<i64, &str> = predictions.iter().map(|(i, s)| (*i, s.as_str())).collect();
    let missing: Vec<i64> = references
        .iter()
        .map(|e| e.index)
        .filter(|i| !by_index.contains_key(i))
        .collect();
    let known: std::collections::HashSet<i64> = references.iter().map(|e| e.index).collect();
    let extra: Vec<i64> = predictions
        .iter()
        .map(|(i, _)| *i)
        .filter(|i| !known.contains(i))
        .collect();
    if !missing.is_empty() || !extra.is_empty() {
        let show = |v: &[i64]| {
            let head: Vec<String> = v.iter().take(20).map(i64::to_string).collect();
            let more = if v.len() > 20 {
                format!(" and {} more", v.len() - 20)
            } else {
                String::new()
            };
            format!("[{}]{more}", head.join(", "))
        };
        return Err(Error::Alignment(format!(
            "predictions lack indices {}; predictions have unknown indices {}",
            show(&missing),
            show(&extra)
        ))
        .into());
    }

    let rows: Vec<(&str, &str, &str)> = references
        .iter()
        .map(|e| {
            (
                e.district.as_str(),
                e.ipa.as_deref().unwrap_or(""),
                by_index[&e.index],
            )
        })
        .collect();
    let all: Vec<(&str, &str)> = rows.iter().map(|r| (r.1, r.2)).collect();
    let overall = score(&all)?;
    let mut districts: BTreeMap<&str, Vec<(&str, &str)>> = BTreeMap::new();
    for r in &rows {
        districts.entry(r.0).or_default().push((r.1, r.2));
    }
    let per_district = districts
        .iter()
        .map(|(d, pairs)| Ok((d.to_string(), score(pairs)?)))
        .collect::<Result<BTreeMap<_, _>>>()?;

    let mut summary = json!({
        "rows": rows.len(),
        "overall": overall,
        "districts": per_district,
    });
    if a.split {
        if rows.len() < 2 {
            bail!("the public/private split needs at least two rows");
        }
        let mut order: Vec<usize> = (0..rows.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(run.train.seed));
        let (public, private) = order.split_at(rows.len().div_ceil(2));
        let pick = |ids: &[usize]| -> Vec<(&str, &str)> {
            let mut ids = ids.to_vec();
            ids.sort_unstable();
            ids.iter().map(|&i| all[i]).collect()
        };
        summary["split_seed"] = json!(run.train.seed);
        summary["public"] = json!(score(&pick(public))?);
        summary["private"] = json!(score(&pick(private))?);
    }
    let text = serde_json::to_string_pretty(&summary)?;
    if let Some(path) = &a.json_out {
        fs::write(path, &text).with_context(|| format!("writing {}", path.display()))?;
    }
    log::info!(
        "WER {:.3}% over {} reference words (S {}, D {}, I {})",
        overall.wer,
        overall.ref_words,
        overall.substitutions,
        overall.deletions,
        overall.insertions
    );
    println!("{text}");
    Ok(ExitCode::SUCCESS)
}
