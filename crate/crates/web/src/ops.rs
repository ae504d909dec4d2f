use dvnc::bounds::{bound_comparison, concentration_check, BoundParams, ConcentrationSpec};
use dvnc::quantizer::{kmeans, quantize};
use dvnc::{Graph, Tensor};
use serde::{Deserialize, Serialize};

type Out = Result<String, String>;

fn parse<'a, T: Deserialize<'a>>(text: &'a str) -> Result<T, String> {
    serde_json::from_str(text).map_err(|e| format!("bad request: {e}"))
}

fn reply<T: Serialize>(value: &T) -> Out {
    serde_json::to_string(value).map_err(|e| e.to_string())
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct QuantizeRequest {
    points: Vec<[f64; 2]>,
    codebook: Vec<Vec<f64>>,
    /// 1 snaps whole points, 2 snaps each coordinate separately.
    segments: usize,
    #[serde(default = "default_beta")]
    beta: f64,
}

fn default_beta() -> f64 {
    0.25
}

#[derive(Serialize)]
struct QuantizeReply {
    indices: Vec<usize>,
    quantized: Vec<[f64; 2]>,
    codebook_loss: f64,
    commitment_loss: f64,
    distinct_messages: usize,
}

/// `{"points": [[x, y], ...], "codebook": [[..], ...], "segments": 1|2}`.
/// Codebook rows have `2 / segments` entries.
pub fn quantize_points(request: &str) -> Out {
    let req: QuantizeRequest = parse(request)?;
    if req.points.is_empty() {
        return reply(&QuantizeReply { indices: vec![], quantized: vec![], codebook_loss: 0.0, commitment_loss: 0.0, distinct_messages: 0 });
    }
    let dim = req.codebook.first().map_or(0, Vec::len);
    let graph = Graph::new();
    let h = Tensor::from_rows(&req.points.iter().map(|p| p.to_vec()).collect::<Vec<_>>()).map_err(|e| e.to_string())?;
    let codebook = Tensor::from_rows(&req.codebook).map_err(|e| e.to_string())?;
    if dim * req.segments != 2 {
        return Err(format!("codebook rows have {dim} entries but {} segments of a 2-D point need {}", req.segments, 2 / req.segments.max(1)));
    }
    let q = quantize(graph.constant(h).map_err(|e| e.to_string())?, graph.constant(codebook).map_err(|e| e.to_string())?, req.segments, req.beta, false)
        .map_err(|e| e.to_string())?;
    let quantized = q.quantized.value().rows().map(|r| [r[0], r[1]]).collect();
    let mut combos: Vec<&[usize]> = q.indices.chunks(req.segments).collect();
    combos.sort_unstable();
    combos.dedup();
    reply(&QuantizeReply {
        distinct_messages: combos.len(),
        indices: q.indices.clone(),
        quantized,
        codebook_loss: q.codebook_loss.value().item(),
        commitment_loss: q.commitment_loss.value().item(),
    })
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct FitRequest {
    points: Vec<Vec<f64>>,
    size: usize,
    #[serde(default)]
    seed: u64,
    #[serde(default = "default_iters")]
    max_iters: usize,
}

fn default_iters() -> usize {
    50
}

#[derive(Serialize)]
struct FitReply {
    codebook: Vec<Vec<f64>>,
    sse_history: Vec<f64>,
}

/// `{"points": [[..], ...], "size": L, "seed": s}`.
pub fn fit_codebook(request: &str) -> Out {
    let req: FitRequest = parse(request)?;
    let samples = Tensor::from_rows(&req.points).map_err(|e| e.to_string())?;
    let fit = kmeans(&samples, req.size, req.seed, req.max_iters).map_err(|e| e.to_string())?;
    reply(&FitReply { codebook: fit.centroids.rows().map(<[f64]>::to_vec).collect(), sse_history: fit.sse_history })
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct CurveRequest {
    params: BoundParams,
    m_max: u32,
}

#[derive(Serialize)]
struct CurvePoint {
    m: u32,
    with: f64,
    without: f64,
    with_radicand_log10: f64,
    without_radicand_log10: f64,
    ratio_log10: f64,
}

/// `{"params": {...bound parameters...}, "m_max": 64}`; one point per m.
pub fn bound_curve(request: &str) -> Out {
    let req: CurveRequest = parse(request)?;
    if req.m_max == 0 || req.m_max > 4096 {
        return Err("m_max must lie in 1..=4096".into());
    }
    let points = (1..=req.m_max)
        .map(|m| {
            let c = bound_comparison(&BoundParams { m, ..req.params.clone() }).map_err(|e| e.to_string())?;
            Ok(CurvePoint {
                m,
                with: c.with,
                without: c.without,
                with_radicand_log10: c.with_radicand.log10(),
                without_radicand_log10: c.ratio_log10 + c.with_radicand.log10(),
                ratio_log10: c.ratio_log10,
            })
        })
        .collect::<Result<Vec<_>, String>>()?;
    reply(&points)
}

/// A concentration spec in the same JSON schema as the CLI.
pub fn concentration(request: &str) -> Out {
    let spec: ConcentrationSpec = parse(request)?;
    // The page runs on the main thread; keep requests interactive.
    let draws = (spec.n as u64) * (spec.trials as u64) + spec.reference_samples as u64;
    if draws > 50_000_000 {
        return Err(format!("request needs {draws} message draws; the demo caps this at 5e7"));
    }
    reply(&concentration_check(&spec, &spec.distribution).map_err(|e| e.to_string())?)
}
