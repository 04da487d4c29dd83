use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Exp1, LogNormal};

use crate::catalog::AdapterId;
use crate::engine::Request;
use crate::error::{Result, SimError};
use crate::scenario::{ArrivalConfig, LengthConfig, WorkloadConfig};
use crate::sim::sub_rng;
use crate::time::SimTime;

/// One line of a trace workload file.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceLine {
    pub arrival: SimTime,
    pub prompt_tokens: u32,
    pub max_new_tokens: u32,
    pub adapter: Option<AdapterId>,
}

/// Parses `arrival_time_ns prompt_tokens max_new_tokens adapter_id` records,
/// separated by whitespace or commas. `-` means no adapter; `#` starts a
/// comment.
pub fn parse_trace_file(text: &str) -> Result<Vec<TraceLine>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line_no = i + 1;
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line
            .split(|c: char| c == ',' || c.is_whitespace())
            .filter(|f| !f.is_empty())
            .collect();
        if fields.len() != 4 {
            return Err(SimError::Parse {
                line: line_no,
                message: format!("expected 4 fields, found {}", fields.len()),
            });
        }
        let num = |s: &str, what: &str| {
            s.parse::<u64>().map_err(|_| SimError::Parse {
                line: line_no,
                message: format!("{what} `{s}` is not a non-negative integer"),
            })
        };
        let prompt = num(fields[1], "prompt_tokens")?;
        if prompt == 0 {
            return Err(SimError::Parse {
                line: line_no,
                message: "prompt_tokens must be at least 1".into(),
            });
        }
        out.push(TraceLine {
            arrival: SimTime(num(fields[0], "arrival_time_ns")?),
            prompt_tokens: u32::try_from(prompt).unwrap_or(u32::MAX),
            max_new_tokens: u32::try_from(num(fields[2], "max_new_tokens")?).unwrap_or(u32::MAX),
            adapter: (fields[3] != "-").then(|| AdapterId::from(fields[3])),
        });
    }
    Ok(out)
}

fn sample_length(cfg: &LengthConfig, rng: &mut impl Rng, min: u32) -> Result<u32> {
    Ok(match cfg {
        LengthConfig::Fixed { value } => *value,
        LengthConfig::LogNormal { mu, sigma } => {
            let d = LogNormal::new(*mu, *sigma)
                .map_err(|e| SimError::config("workload length", e.to_string()))?;
            let x: f64 = d.sample(rng);
            (x.round().min(u32::MAX as f64) as u32).max(min)
        }
    })
}

/// Builds the request list for a workload, sorted by arrival time.
///
/// Arrivals, prompt lengths, output lengths and adapter choices each draw
/// from their own stream so changing one leaves the others untouched.
pub fn generate_workload(
    spec: &WorkloadConfig,
    adapters: &[AdapterId],
    seed: u64,
) -> Result<Vec<Request>> {
    if let ArrivalConfig::Trace { path } = &spec.arrival {
        return load_trace(path);
    }
    let times: Vec<SimTime> = match &spec.arrival {
        ArrivalConfig::Burst { count } => vec![SimTime::ZERO; *count as usize],
        ArrivalConfig::Poisson { rate } => {
            let mut rng = sub_rng(seed, "arrivals");
            let mut t = 0.0;
            let mut out = Vec::new();
            if *rate > 0.0 {
                loop {
                    let gap: f64 = Exp1.sample(&mut rng);
                    t += gap / rate;
                    if t > spec.duration {
                        break;
                    }
                    out.push(SimTime::from_secs_round(t));
                }
            }
            out
        }
        ArrivalConfig::Trace { .. } => unreachable!(),
    };
    let mut prompt_rng = sub_rng(seed, "prompt_lengths");
    let mut output_rng = sub_rng(seed, "max_new_tokens");
    let mut adapter_rng = sub_rng(seed, "adapters");
    let mut current = 0usize;
    let mut requests = Vec::with_capacity(times.len());
    for (i, t) in times.into_iter().enumerate() {
        let prompt = sample_length(&spec.prompt_length, &mut prompt_rng, 1)?;
        let max_new = sample_length(&spec.max_new_tokens, &mut output_rng, 0)?;
        let adapter = if adapters.is_empty() {
            None
        } else {
            if i > 0 && adapters.len() > 1 && adapter_rng.random_bool(spec.adapter_switch_probability) {
                let step = adapter_rng.random_range(1..adapters.len());
                current = (current + step) % adapters.len();
            }
            Some(adapters[current].clone())
        };
        requests.push(Request::new(i as u64, t, prompt.max(1), max_new, adapter));
    }
    Ok(requests)
}

fn load_trace(path: &Path) -> Result<Vec<Request>> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| SimError::Io(format!("{}: {e}", path.display())))?;
    let mut lines = parse_trace_file(&text)?;
    lines.sort_by_key(|l| l.arrival);
    Ok(lines
        .into_iter()
        .enumerate()
        .map(|(i, l)| Request::new(i as u64, l.arrival, l.prompt_tokens, l.max_new_tokens, l.adapter))
        .collect())
}
