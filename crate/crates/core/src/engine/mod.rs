//! Simulated inference: requests, batches, the KV ledger, and the cost
//! schedules of pipelined prefill and decode.

mod exec;
mod kv;
mod request;

pub use exec::{
    continuous_batch_admit, execute_decode_step, execute_prefill, single_gpu_execute, Hop,
    StageWork,
};
pub use kv::KvLedger;
pub use request::{Batch, BatchId, BatchPhase, Request, RequestId, RequestStage};
