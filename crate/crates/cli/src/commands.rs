use std::fs;
use std::io::Write;
use std::path::Path;

use dopra_core::metrics::chair::CaptionInput;
use dopra_core::metrics::{
    chair_scores, parse_jsonl, pope_scores, CaptionRecord, ChairScores, ImageId, Lexicon,
    PopeRecord, ReportRow,
};
use dopra_core::model::trace::TraceOptions;
use dopra_core::model::{
    RecordingModel, StepModel, ToyModelConfig, ToyTransformer, TraceFile, TraceReplay,
};
use dopra_core::penalty::Detector;
use dopra_core::response::{export_heatmap, load_matrix, PgmFormat, ResponseMap};
use dopra_core::scenario::{generate, sweep as run_sweep, sweep_csv, Scenario, SweepGrid};
use dopra_core::{DecodeResult, Strategy, TokenSequence};
use log::info;
use serde::Serialize;

use crate::config;
use crate::error::CliError;
use crate::{ChairArgs, DecodeArgs, GenArgs, HeatmapArgs, InspectArgs, PopeArgs, SweepArgs};

fn write_output(text: &str, out: Option<&Path>) -> Result<(), CliError> {
    match out {
        Some(path) => fs::write(path, text).map_err(|e| CliError::io(path.display(), e)),
        None => {
            let mut stdout = std::io::stdout().lock();
            stdout.write_all(text.as_bytes())?;
            stdout.flush()?;
            Ok(())
        }
    }
}

fn emit_json<T: Serialize>(value: &T, out: Option<&Path>) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value).expect("serializable");
    text.push('\n');
    write_output(&text, out)
}

fn read_text(path: &Path) -> Result<String, CliError> {
    fs::read_to_string(path).map_err(|e| CliError::io(path.display(), e))
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, CliError> {
    serde_json::from_str(&read_text(path)?).map_err(|e| CliError::io(path.display(), e))
}

pub fn decode(a: DecodeArgs) -> Result<(), CliError> {
    let cfg = config::merge(&a.flags, a.config.as_deref())?;
    let result: DecodeResult = if let Some(path) = &a.trace {
        let trace = TraceFile::read(path).map_err(|e| CliError::io(path.display(), e))?;
        let h = &trace.header;
        if cfg.strategy == Strategy::Dopra && !h.full_tensor && cfg.layer != h.attn_layer {
            return Err(CliError::Invalid(format!(
                "trace stores layer {} only; pass --layer {}",
                h.attn_layer, h.attn_layer
            )));
        }
        let prompt = trace.prompt_sequence()?;
        let replay = TraceReplay::new(trace);
        dopra_core::decode(&replay, &prompt, &cfg)?
    } else {
        let mut toy_cfg = match &a.toy_config {
            Some(path) => toml::from_str::<ToyModelConfig>(&read_text(path)?)
                .map_err(|e| CliError::io(path.display(), e))?,
            None if a.toy_seed.is_some() => ToyModelConfig::default(),
            None => {
                return Err(CliError::Invalid(
                    "one of --trace, --toy-seed or --toy-config is required".into(),
                ))
            }
        };
        if let Some(seed) = a.toy_seed {
            toy_cfg.seed = seed;
        }
        let model = ToyTransformer::new(toy_cfg)?;
        if a.n_image >= a.prompt.len() {
            return Err(CliError::Invalid(format!(
                "--n-image {} leaves no text tokens in a {}-token prompt",
                a.n_image,
                a.prompt.len()
            )));
        }
        let prompt = TokenSequence::new(&a.prompt[..a.n_image], &a.prompt[a.n_image..])?;
        info!(
            "toy model seed {}, prompt of {} tokens",
            model.config().seed,
            prompt.len()
        );
        match &a.record {
            Some(path) => {
                if cfg.layer >= model.shape().n_layers {
                    return Err(CliError::Invalid(format!(
                        "cannot record layer {} of a {}-layer model",
                        cfg.layer,
                        model.shape().n_layers
                    )));
                }
                let options = TraceOptions {
                    attn_layer: cfg.layer,
                    window_rows: cfg.k,
                    full_tensor: a.full_tensor,
                    top_k: (cfg.n_can * cfg.n_beam).max(64),
                };
                let recording = RecordingModel::new(&model, &prompt, options)?;
                let result = dopra_core::decode(&recording, &prompt, &cfg)?;
                let trace = recording.into_trace();
                info!("recorded {} steps to {}", trace.len(), path.display());
                trace
                    .write(path)
                    .map_err(|e| CliError::io(path.display(), e))?;
                result
            }
            None => dopra_core::decode(&model, &prompt, &cfg)?,
        }
    };
    emit_json(&result, a.out.as_deref())
}

#[derive(Serialize)]
struct InspectRecord {
    step: usize,
    seq_len: usize,
    generated: usize,
    active: bool,
    window_start: Option<usize>,
    window: Option<Vec<Vec<f64>>>,
    scaled: Option<Vec<Vec<f64>>>,
    scores: Option<Vec<f64>>,
    phi: Option<f64>,
    c: Option<usize>,
}

pub fn inspect(a: InspectArgs) -> Result<(), CliError> {
    let trace = TraceFile::read(&a.trace).map_err(|e| CliError::io(a.trace.display(), e))?;
    let h = &trace.header;
    let layer = a.layer.unwrap_or(h.attn_layer);
    if !h.full_tensor && layer != h.attn_layer {
        return Err(CliError::Invalid(format!(
            "trace stores layer {} only",
            h.attn_layer
        )));
    }
    if a.k == 0 || a.sigma.is_nan() || a.sigma <= 0.0 {
        return Err(CliError::Invalid(
            "k must be at least 1 and sigma positive".into(),
        ));
    }
    let detector = Detector {
        layer,
        k: a.k,
        sigma: a.sigma,
    };
    let mut text = String::new();
    for (i, record) in trace.steps.iter().enumerate() {
        let out = trace.replay_step(i)?;
        let mut tokens = trace.prompt.clone();
        tokens.extend_from_slice(&record.generated);
        let seq = TokenSequence::from_parts(tokens, h.n_image, h.n_prompt)?;
        let inspection = detector.inspect(&out, &seq)?;
        let line = match inspection {
            Some(ins) => InspectRecord {
                step: i,
                seq_len: record.seq_len,
                generated: record.generated.len(),
                active: true,
                window_start: Some(ins.window.start),
                window: Some(ins.window.values),
                scaled: Some(ins.scaled.values),
                scores: Some(ins.descriptor.scores),
                phi: Some(ins.descriptor.phi),
                c: Some(ins.descriptor.c),
            },
            None => InspectRecord {
                step: i,
                seq_len: record.seq_len,
                generated: record.generated.len(),
                active: false,
                window_start: None,
                window: None,
                scaled: None,
                scores: None,
                phi: None,
                c: None,
            },
        };
        text.push_str(&serde_json::to_string(&line).expect("serializable"));
        text.push('\n');
    }
    write_output(&text, a.out.as_deref())
}

#[derive(Serialize)]
struct GenSummary {
    steps: usize,
    bytes: usize,
    plant_position: Option<usize>,
}

pub fn gen(a: GenArgs) -> Result<(), CliError> {
    let scenario: Scenario = read_json(&a.scenario)?;
    let trace = generate(&scenario)?;
    let bytes = trace.to_bytes();
    fs::write(&a.out, &bytes).map_err(|e| CliError::io(a.out.display(), e))?;
    emit_json(
        &GenSummary {
            steps: trace.len(),
            bytes: bytes.len(),
            plant_position: scenario.plant.as_ref().map(|p| p.position),
        },
        None,
    )
}

pub fn sweep(a: SweepArgs) -> Result<(), CliError> {
    let grid: SweepGrid = read_json(&a.grid)?;
    let rows = run_sweep(&grid)?;
    write_output(&sweep_csv(&rows)?, a.out.as_deref())
}

#[derive(Serialize)]
struct CaptionDetail {
    image_id: ImageId,
    mentioned: Vec<String>,
    hallucinated: Vec<String>,
}

#[derive(Serialize)]
struct ChairReport {
    #[serde(flatten)]
    scores: ChairScores,
    records: Vec<CaptionDetail>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pope_f1: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    table: Option<String>,
}

pub fn chair(a: ChairArgs) -> Result<(), CliError> {
    let lexicon = Lexicon::load(&a.lexicon).map_err(|e| CliError::io(a.lexicon.display(), e))?;
    let inputs: Vec<CaptionInput> =
        parse_jsonl(&read_text(&a.records)?).map_err(|e| CliError::io(a.records.display(), e))?;
    let records: Vec<CaptionRecord> = inputs
        .into_iter()
        .map(|i| CaptionRecord::from_input(i, &lexicon))
        .collect();
    let scores = chair_scores(&records)?;
    let pope_f1 = match &a.pope {
        Some(path) => {
            let probes: Vec<PopeRecord> =
                parse_jsonl(&read_text(path)?).map_err(|e| CliError::io(path.display(), e))?;
            Some(pope_scores(&probes)?.mean_f1)
        }
        None => None,
    };
    let table = pope_f1.map(|f1| {
        ReportRow {
            pope_f1: f1,
            c_s: scores.c_s,
            c_i: scores.c_i,
        }
        .markdown()
    });
    let details = records
        .iter()
        .map(|r| CaptionDetail {
            image_id: r.image_id.clone(),
            mentioned: r.mentioned_objects.iter().cloned().collect(),
            hallucinated: r.hallucinated().into_iter().cloned().collect(),
        })
        .collect();
    emit_json(
        &ChairReport {
            scores,
            records: details,
            pope_f1,
            table,
        },
        a.out.as_deref(),
    )
}

pub fn pope(a: PopeArgs) -> Result<(), CliError> {
    let records: Vec<PopeRecord> =
        parse_jsonl(&read_text(&a.records)?).map_err(|e| CliError::io(a.records.display(), e))?;
    emit_json(&pope_scores(&records)?, a.out.as_deref())
}

#[derive(Serialize)]
struct Region {
    index: usize,
    row: usize,
    col: usize,
    score: f64,
}

#[derive(Serialize)]
struct HeatmapReport {
    queries: usize,
    regions: usize,
    grid: dopra_core::response::Grid,
    top: Vec<Region>,
}

pub fn heatmap(a: HeatmapArgs) -> Result<(), CliError> {
    let q = load_matrix(&a.query).map_err(|e| CliError::io(a.query.display(), e))?;
    let x = load_matrix(&a.visual).map_err(|e| CliError::io(a.visual.display(), e))?;
    let map = ResponseMap::build(&q, &x, a.grid, a.topk)?;
    let format = if a.plain {
        PgmFormat::P2
    } else {
        PgmFormat::P5
    };
    export_heatmap(&map, &a.out, format).map_err(|e| CliError::io(a.out.display(), e))?;
    let top = map
        .top_indices
        .iter()
        .map(|&i| Region {
            index: i,
            row: i / a.grid.cols,
            col: i % a.grid.cols,
            score: map.region_scores[i],
        })
        .collect();
    emit_json(
        &HeatmapReport {
            queries: q.nrows(),
            regions: x.nrows(),
            grid: a.grid,
            top,
        },
        None,
    )
}
