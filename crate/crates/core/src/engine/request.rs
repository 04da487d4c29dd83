use std::fmt;

use serde::{Deserialize, Serialize};

use crate::catalog::AdapterId;
use crate::time::SimTime;

pub type RequestId = u64;
pub type BatchId = u64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RequestStage {
    Queued,
    Prefill,
    Decode,
    Done,
    AwaitingReconstruction,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Request {
    pub request_id: RequestId,
    pub arrival_time: SimTime,
    pub prompt_tokens: u32,
    /// Decode steps after the first token.
    pub max_new_tokens: u32,
    pub adapter_id: Option<AdapterId>,
    pub stage: RequestStage,
    /// Tokens produced by decode steps; the prefill token is not counted.
    pub generated: u32,
    /// Time from arrival to the first token.
    pub ttft: Option<SimTime>,
    pub completion_time: Option<SimTime>,
}

impl Request {
    pub fn new(
        request_id: RequestId,
        arrival_time: SimTime,
        prompt_tokens: u32,
        max_new_tokens: u32,
        adapter_id: Option<AdapterId>,
    ) -> Self {
        Request {
            request_id,
            arrival_time,
            prompt_tokens,
            max_new_tokens,
            adapter_id,
            stage: RequestStage::Queued,
            generated: 0,
            ttft: None,
            completion_time: None,
        }
    }

    /// Tokens a rebuilt KV cache must cover: the prompt plus everything
    /// generated so far.
    pub fn merged_length(&self) -> u64 {
        u64::from(self.prompt_tokens) + u64::from(self.generated)
    }

    pub fn is_finished(&self) -> bool {
        self.stage == RequestStage::Done
    }

    /// Records the first token at `now`. Later calls keep the original value.
    pub fn record_first_token(&mut self, now: SimTime) {
        if self.ttft.is_none() {
            self.ttft = Some(now.saturating_sub(self.arrival_time));
        }
    }

    pub fn latency(&self) -> Option<SimTime> {
        self.completion_time
            .map(|t| t.saturating_sub(self.arrival_time))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BatchPhase {
    Prefill,
    /// Prefill over prompt plus generated tokens that restores a lost KV cache.
    Reconstruct,
    Decode,
}

impl BatchPhase {
    pub fn is_prefill_like(self) -> bool {
        matches!(self, BatchPhase::Prefill | BatchPhase::Reconstruct)
    }
}

impl fmt::Display for BatchPhase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            BatchPhase::Prefill => "prefill",
            BatchPhase::Reconstruct => "reconstruct",
            BatchPhase::Decode => "decode",
        })
    }
}

/// Requests that travel through the pipeline together. All share one adapter.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Batch {
    pub batch_id: BatchId,
    pub request_ids: Vec<RequestId>,
    pub adapter_id: Option<AdapterId>,
    pub phase: BatchPhase,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_token_is_recorded_once() {
        let mut r = Request::new(1, SimTime(100), 10, 5, None);
        r.record_first_token(SimTime(400));
        r.record_first_token(SimTime(900));
        assert_eq!(r.ttft, Some(SimTime(300)));
        r.generated = 5;
        assert_eq!(r.merged_length(), 15);
    }
}
