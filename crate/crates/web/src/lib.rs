//! Browser bindings. Each export takes plain numbers or comma-separated
//! lists and returns a JSON string for the page to plot.

use relu_qsgd::codec;
use relu_qsgd::engine::{self, RunConfig, Scheme};
use relu_qsgd::harness::{self, PhaseGrid, SampleAxis};
use relu_qsgd::planted::{PlantedDataset, WStarSpec};
use relu_qsgd::rng::{Purpose, Stream};
use serde_json::json;
use wasm_bindgen::prelude::*;

/// Keeps a single call within a few seconds in a browser tab.
const MAX_WORK: usize = 20_000_000;

fn parse_list<T: std::str::FromStr>(raw: &str, what: &str) -> Result<Vec<T>, String> {
    let items: Result<Vec<T>, _> = raw
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| {
            s.parse::<T>()
                .map_err(|_| format!("{what}: cannot parse {s:?}"))
        })
        .collect();
    let items = items?;
    if items.is_empty() {
        return Err(format!("{what}: empty list"));
    }
    Ok(items)
}

fn curve(trace: &engine::Trace) -> serde_json::Value {
    json!({
        "status": harness::status_name(trace.status),
        "iterations_to_tol": trace.iterations_to(1e-3),
        "rel_err": trace.records.iter().map(|r| r.rel_err).collect::<Vec<_>>(),
        "upstream_bytes": trace.total_upstream_bytes(),
    })
}

/// SGD at batch `m` next to QSGD at each bit width in `bits`, all from the
/// same spectral initialization.
pub fn convergence_curves_json(
    n: usize,
    d: usize,
    m: usize,
    workers: usize,
    bits: &str,
    max_iters: u64,
    seed: u64,
) -> Result<String, String> {
    let bits: Vec<u32> = parse_list(bits, "bits")?;
    if n.saturating_mul(d) > MAX_WORK {
        return Err(format!(
            "n * d = {} is too large for the demo (limit {MAX_WORK})",
            n.saturating_mul(d)
        ));
    }
    let ds = PlantedDataset::generate(n, d, &WStarSpec::paper_default(), seed)
        .map_err(|e| e.to_string())?;
    let base = RunConfig {
        batch: m,
        workers,
        max_iters,
        seed,
        ..RunConfig::default()
    };
    let sgd = RunConfig {
        scheme: Scheme::Sgd,
        workers: 1,
        ..base.clone()
    };
    let mut series = vec![
        json!({ "label": format!("SGD m={m}"), "curve": curve(&engine::run(&sgd, &ds).map_err(|e| e.to_string())?) }),
    ];
    for b in bits {
        let cfg = RunConfig {
            scheme: Scheme::Qsgd,
            bits: b,
            ..base.clone()
        };
        let trace = engine::run(&cfg, &ds).map_err(|e| format!("b={b}: {e}"))?;
        series.push(json!({ "label": format!("QSGD b={b}"), "curve": curve(&trace) }));
    }
    Ok(json!({ "n": n, "d": d, "m": m, "series": series }).to_string())
}

/// Quantizes `values` (or, when empty, `d` Gaussian entries) once and
/// reports levels, reconstruction and the encoded size.
pub fn quantize_preview_json(
    values: &str,
    d: usize,
    bits: u32,
    seed: u64,
) -> Result<String, String> {
    let s = codec::levels_for_bits(bits).map_err(|e| e.to_string())?;
    let mut stream = Stream::new(seed, Purpose::Quant, 0);
    let v: Vec<f64> = if values.trim().is_empty() {
        if d == 0 || d > 4096 {
            return Err("d must be between 1 and 4096".into());
        }
        let mut data = Stream::new(seed, Purpose::Features, 0);
        (0..d).map(|_| data.standard_normal()).collect()
    } else {
        parse_list(values, "values")?
    };
    let q = codec::quantize(&v, s, &mut stream).map_err(|e| e.to_string())?;
    let bytes = codec::encode(&q, bits).map_err(|e| e.to_string())?;
    let signed: Vec<i64> = q
        .signs
        .iter()
        .zip(&q.levels)
        .map(|(&g, &l)| i64::from(g) * i64::from(l))
        .collect();
    Ok(json!({
        "s": s,
        "norm": q.norm,
        "input": v,
        "signed_levels": signed,
        "dequantized": codec::dequantize(&q),
        "encoded_bytes": bytes.len(),
        "float64_bytes": 8 * v.len(),
        "variance_factor": codec::variance_factor(v.len(), s),
        "hex_prefix": bytes.iter().take(32).map(|b| format!("{b:02x}")).collect::<String>(),
    })
    .to_string())
}

/// Success rate per (d, n = ratio * d) cell.
pub fn phase_grid_json(
    d_values: &str,
    ratios: &str,
    trials: usize,
    budget: u64,
    scheme: &str,
    seed: u64,
) -> Result<String, String> {
    let scheme = match scheme {
        "sgd" => Scheme::Sgd,
        "qsgd" => Scheme::Qsgd,
        other => return Err(format!("scheme: expected sgd or qsgd, got {other:?}")),
    };
    let grid = PhaseGrid {
        d_values: parse_list(d_values, "d values")?,
        n: SampleAxis::Ratios(parse_list(ratios, "ratios")?),
        trials_per_cell: trials,
        iteration_budget: budget,
        scheme,
        ..PhaseGrid::default()
    };
    let work: usize = grid
        .cells()
        .iter()
        .map(|c| c.d * c.d)
        .sum::<usize>()
        .saturating_mul(trials)
        .saturating_mul(budget as usize);
    if work > 200 * MAX_WORK {
        return Err("grid is too large for the demo; lower d, trials or the budget".into());
    }
    let table = harness::phase_transition(&grid, seed).map_err(|e| e.to_string())?;
    Ok(serde_json::to_string(&table).expect("table serializes"))
}

#[wasm_bindgen]
pub fn convergence_curves(
    n: usize,
    d: usize,
    m: usize,
    workers: usize,
    bits: &str,
    max_iters: u32,
    seed: u32,
) -> Result<String, JsValue> {
    convergence_curves_json(
        n,
        d,
        m,
        workers,
        bits,
        u64::from(max_iters),
        u64::from(seed),
    )
    .map_err(|e| JsValue::from_str(&e))
}

#[wasm_bindgen]
pub fn quantize_preview(values: &str, d: usize, bits: u32, seed: u32) -> Result<String, JsValue> {
    quantize_preview_json(values, d, bits, u64::from(seed)).map_err(|e| JsValue::from_str(&e))
}

#[wasm_bindgen]
pub fn phase_grid(
    d_values: &str,
    ratios: &str,
    trials: usize,
    budget: u32,
    scheme: &str,
    seed: u32,
) -> Result<String, JsValue> {
    phase_grid_json(
        d_values,
        ratios,
        trials,
        u64::from(budget),
        scheme,
        u64::from(seed),
    )
    .map_err(|e| JsValue::from_str(&e))
}
