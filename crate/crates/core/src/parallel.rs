//! In-process simulation of sequence-parallel attention.
//!
//! Workers are programs advanced in bulk-synchronous supersteps: during step
//! `s` a worker reads whatever has been delivered to it so far and queues
//! sends; queued messages are delivered before step `s + 1`. Channels are
//! per (sender, receiver) FIFOs, so a worker's inputs never depend on how
//! workers are interleaved inside a step. [`Lockstep`] runs all workers on
//! the calling thread; the `inferix` crate adds a threaded executor with the
//! same semantics.
//!
//! Three strategies are provided, all over `[tokens, heads * head_dim]`
//! tensors sharded by sequence:
//!
//! * Ulysses: all-to-all from sequence shards to head shards, full-sequence
//!   attention per local head, all-to-all back.
//! * Ring pass-KV: queries stay put, K/V shards travel `world - 1` hops.
//! * Ring pass-Q: K/V stay put, each Q shard travels with its running
//!   online-softmax partial; the finished partial hops once more to its owner.
//!
//! Traffic formulas (4-byte elements, `W` workers, `H` heads, `d` head dim,
//! `n_q`/`n_kv` total query/key tokens, loopback messages excluded):
//!
//! | strategy     | messages            | elements                                   |
//! |--------------|---------------------|--------------------------------------------|
//! | ulysses      | `2 W (W-1)`         | `2 (W-1)/W · H d (n_q + n_kv)`             |
//! | ring_pass_kv | `W (W-1)`           | `2 (W-1) n_kv H d`                         |
//! | ring_pass_q  | `W (W-1) + W`       | `(W-1) n_q H (2d+2) + n_q H (d+2)`         |
//!
//! Per rotation a pass-Q message carries `n_shard·d` query values plus a
//! `n_shard·(d+2)` partial per head; a pass-KV message carries `2·n_shard·d`.
//! With `W = 1` every strategy sends nothing.

use alloc::collections::VecDeque;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt::Write as _;
use core::sync::atomic::{AtomicU64, Ordering};

use crate::attention::{
    attention_partial, merge_partials, multi_head_attention, scaled_dot_attention, AttentionError,
    AttentionMask, AttentionPartial,
};
use crate::tensor::{Tensor, TensorError};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ParallelError {
    #[error("heads ({heads}) not divisible by world size ({world})")]
    HeadsNotDivisible { heads: usize, world: usize },
    #[error("world size must be >= 1")]
    EmptyWorld,
    #[error("shape mismatch: {0}")]
    Shape(&'static str),
    #[error("worker {rank} expected a message from {from} at step {step}")]
    MissingMessage { rank: usize, from: usize, step: usize },
    #[error("workers did not finish within {0} steps")]
    Stalled(usize),
    #[error("{0} messages left undelivered")]
    Undelivered(usize),
    #[error("worker panicked or executor failed: {0}")]
    Executor(String),
    #[error(transparent)]
    Attention(#[from] AttentionError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Message body: a tag plus any number of f32 tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct Payload {
    pub tag: u32,
    pub tensors: Vec<Tensor>,
}

impl Payload {
    pub fn new(tag: u32, tensors: Vec<Tensor>) -> Self {
        Self { tag, tensors }
    }

    pub fn byte_len(&self) -> usize {
        self.tensors.iter().map(Tensor::byte_len).sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct TraceRecord {
    pub step: usize,
    pub sender: usize,
    pub receiver: usize,
    pub bytes: usize,
    pub tag: u32,
}

/// Complete log of sends plus received-byte accounting.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Trace {
    pub records: Vec<TraceRecord>,
    pub bytes_received: usize,
}

impl Trace {
    pub fn bytes_sent(&self) -> usize {
        self.records.iter().map(|r| r.bytes).sum()
    }

    /// Messages between distinct workers.
    pub fn wire_messages(&self) -> usize {
        self.records.iter().filter(|r| r.sender != r.receiver).count()
    }

    /// Bytes between distinct workers; loopback deliveries are free.
    pub fn wire_bytes(&self) -> usize {
        self.records
            .iter()
            .filter(|r| r.sender != r.receiver)
            .map(|r| r.bytes)
            .sum()
    }

    /// Records sorted by (step, sender, receiver); executors may log in any order.
    pub fn canonical(&self) -> Trace {
        let mut records = self.records.clone();
        records.sort();
        Trace {
            records,
            bytes_received: self.bytes_received,
        }
    }

    /// Line-delimited export: `step sender receiver bytes tag`, tab separated.
    pub fn to_lines(&self) -> String {
        let mut out = String::new();
        for r in &self.canonical().records {
            let _ = writeln!(out, "{}\t{}\t{}\t{}\t{}", r.step, r.sender, r.receiver, r.bytes, r.tag);
        }
        out
    }

    pub fn extend(&mut self, other: &Trace) {
        self.records.extend_from_slice(&other.records);
        self.bytes_received += other.bytes_received;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StepStatus {
    Continue,
    Done,
}

/// What a worker sees during one superstep.
pub struct StepContext<'a> {
    pub rank: usize,
    pub world: usize,
    pub step: usize,
    inbox: &'a mut [VecDeque<Payload>],
    outbox: &'a mut Vec<(usize, Payload)>,
    received_bytes: usize,
}

impl<'a> StepContext<'a> {
    pub fn new(
        rank: usize,
        world: usize,
        step: usize,
        inbox: &'a mut [VecDeque<Payload>],
        outbox: &'a mut Vec<(usize, Payload)>,
    ) -> Self {
        Self {
            rank,
            world,
            step,
            inbox,
            outbox,
            received_bytes: 0,
        }
    }

    pub fn send(&mut self, to: usize, payload: Payload) {
        self.outbox.push((to, payload));
    }

    pub fn try_recv(&mut self, from: usize) -> Option<Payload> {
        let msg = self.inbox[from].pop_front()?;
        self.received_bytes += msg.byte_len();
        Some(msg)
    }

    pub fn recv(&mut self, from: usize) -> Result<Payload, ParallelError> {
        let (rank, step) = (self.rank, self.step);
        self.try_recv(from)
            .ok_or(ParallelError::MissingMessage { rank, from, step })
    }

    pub fn received_bytes(&self) -> usize {
        self.received_bytes
    }

    pub fn successor(&self) -> usize {
        (self.rank + 1) % self.world
    }

    pub fn predecessor(&self) -> usize {
        (self.rank + self.world - 1) % self.world
    }
}

pub trait WorkerProgram {
    type Output;
    fn step(&mut self, ctx: &mut StepContext<'_>) -> Result<StepStatus, ParallelError>;
    fn finish(self) -> Result<Self::Output, ParallelError>;
}

/// Runs one program per rank to completion.
pub trait Executor {
    fn run<P>(&self, programs: Vec<P>) -> Result<(Vec<P::Output>, Trace), ParallelError>
    where
        P: WorkerProgram + Send,
        P::Output: Send;
}

/// Upper bound on supersteps before an executor gives up.
pub const MAX_STEPS: usize = 4096;

/// Single-threaded deterministic scheduler: runs ranks 0..W in order each step.
#[derive(Debug, Clone, Copy, Default)]
pub struct Lockstep;

/// Shared channel state for one worker group.
#[derive(Debug, Clone)]
pub struct WorkerGroup {
    world: usize,
    /// `inboxes[receiver][sender]`
    inboxes: Vec<Vec<VecDeque<Payload>>>,
    pub trace: Trace,
}

impl WorkerGroup {
    pub fn new(world: usize) -> Result<Self, ParallelError> {
        if world == 0 {
            return Err(ParallelError::EmptyWorld);
        }
        Ok(Self {
            world,
            inboxes: (0..world)
                .map(|_| (0..world).map(|_| VecDeque::new()).collect())
                .collect(),
            trace: Trace::default(),
        })
    }

    pub fn world(&self) -> usize {
        self.world
    }

    pub fn inbox_mut(&mut self, rank: usize) -> &mut [VecDeque<Payload>] {
        &mut self.inboxes[rank]
    }

    /// Deliver a step's sends in FIFO order per (sender, receiver) and log them.
    pub fn deliver(&mut self, step: usize, sender: usize, outbox: Vec<(usize, Payload)>) {
        for (to, payload) in outbox {
            self.trace.records.push(TraceRecord {
                step,
                sender,
                receiver: to,
                bytes: payload.byte_len(),
                tag: payload.tag,
            });
            self.inboxes[to][sender].push_back(payload);
        }
    }

    pub fn pending(&self) -> usize {
        self.inboxes.iter().flatten().map(VecDeque::len).sum()
    }
}

impl Executor for Lockstep {
    fn run<P>(&self, mut programs: Vec<P>) -> Result<(Vec<P::Output>, Trace), ParallelError>
    where
        P: WorkerProgram + Send,
        P::Output: Send,
    {
        let world = programs.len();
        let mut group = WorkerGroup::new(world)?;
        let mut done = vec![false; world];
        let mut step = 0;
        while done.iter().any(|d| !d) {
            if step >= MAX_STEPS {
                return Err(ParallelError::Stalled(MAX_STEPS));
            }
            let mut outboxes = Vec::with_capacity(world);
            for (rank, program) in programs.iter_mut().enumerate() {
                let mut outbox = Vec::new();
                if !done[rank] {
                    let mut ctx = StepContext::new(rank, world, step, group.inbox_mut(rank), &mut outbox);
                    let status = program.step(&mut ctx)?;
                    group.trace.bytes_received += ctx.received_bytes();
                    done[rank] = status == StepStatus::Done;
                }
                outboxes.push(outbox);
            }
            for (rank, outbox) in outboxes.into_iter().enumerate() {
                group.deliver(step, rank, outbox);
            }
            step += 1;
        }
        if group.pending() > 0 {
            return Err(ParallelError::Undelivered(group.pending()));
        }
        let outputs = programs
            .into_iter()
            .map(WorkerProgram::finish)
            .collect::<Result<Vec<_>, _>>()?;
        Ok((outputs, group.trace))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ShardAxis {
    Sequence,
    Head,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ShardSpec {
    pub axis: ShardAxis,
    pub world_size: usize,
    pub shard_lens: Vec<usize>,
}

impl ShardSpec {
    /// Near-even split; the first `extent % world` shards get one extra.
    pub fn even(axis: ShardAxis, extent: usize, world_size: usize) -> Result<Self, ParallelError> {
        if world_size == 0 {
            return Err(ParallelError::EmptyWorld);
        }
        let base = extent / world_size;
        let extra = extent % world_size;
        Ok(Self {
            axis,
            world_size,
            shard_lens: (0..world_size).map(|i| base + usize::from(i < extra)).collect(),
        })
    }

    pub fn extent(&self) -> usize {
        self.shard_lens.iter().sum()
    }

    pub fn offsets(&self) -> Vec<usize> {
        let mut acc = 0;
        self.shard_lens
            .iter()
            .map(|l| {
                let o = acc;
                acc += l;
                o
            })
            .collect()
    }

    pub fn split_rows(&self, t: &Tensor) -> Result<Vec<Tensor>, ParallelError> {
        if t.rows() != self.extent() {
            return Err(ParallelError::Shape("tensor rows do not match shard extent"));
        }
        self.offsets()
            .iter()
            .zip(&self.shard_lens)
            .map(|(&o, &l)| Ok(t.slice_rows(o, l)?))
            .collect()
    }
}

/// Concatenate sequence shards back into one tensor.
pub fn gather_rows(shards: &[Tensor]) -> Result<Tensor, ParallelError> {
    let parts: Vec<&Tensor> = shards.iter().collect();
    Ok(Tensor::concat_rows(&parts)?)
}

// ---------------------------------------------------------------------------
// all-to-all

struct AllToAllWorker {
    send: Vec<Tensor>,
    recv: Vec<Tensor>,
}

impl WorkerProgram for AllToAllWorker {
    type Output = Vec<Tensor>;

    fn step(&mut self, ctx: &mut StepContext<'_>) -> Result<StepStatus, ParallelError> {
        if ctx.step == 0 {
            for (j, t) in core::mem::take(&mut self.send).into_iter().enumerate() {
                ctx.send(j, Payload::new(0, vec![t]));
            }
            return Ok(StepStatus::Continue);
        }
        for i in 0..ctx.world {
            let mut p = ctx.recv(i)?;
            self.recv.push(p.tensors.remove(0));
        }
        Ok(StepStatus::Done)
    }

    fn finish(self) -> Result<Vec<Tensor>, ParallelError> {
        Ok(self.recv)
    }
}

/// `recv[j][i] == send[i][j]`.
pub fn all_to_all<E: Executor>(
    exec: &E,
    send: Vec<Vec<Tensor>>,
) -> Result<(Vec<Vec<Tensor>>, Trace), ParallelError> {
    let world = send.len();
    if world == 0 {
        return Err(ParallelError::EmptyWorld);
    }
    if send.iter().any(|row| row.len() != world) {
        return Err(ParallelError::Shape("send matrix must be world x world"));
    }
    let programs = send
        .into_iter()
        .map(|row| AllToAllWorker {
            send: row,
            recv: Vec::new(),
        })
        .collect();
    exec.run(programs)
}

// ---------------------------------------------------------------------------
// shared problem description

/// Sequence-sharded multi-head attention problem as seen by every worker.
#[derive(Debug, Clone)]
struct Layout {
    heads: usize,
    head_dim: usize,
    q_spec: ShardSpec,
    kv_spec: ShardSpec,
    q_off: Vec<usize>,
    kv_off: Vec<usize>,
}

impl Layout {
    fn new(q: &[Tensor], k: &[Tensor], v: &[Tensor], heads: usize, mask: &AttentionMask) -> Result<Self, ParallelError> {
        let world = q.len();
        if world == 0 {
            return Err(ParallelError::EmptyWorld);
        }
        if k.len() != world || v.len() != world {
            return Err(ParallelError::Shape("q, k, v shard counts differ"));
        }
        let width = q[0].cols();
        if heads == 0 || !width.is_multiple_of(heads) {
            return Err(ParallelError::Shape("width not divisible into heads"));
        }
        for ((qs, ks), vs) in q.iter().zip(k).zip(v) {
            if qs.cols() != width || ks.cols() != width || vs.cols() != width || ks.rows() != vs.rows() {
                return Err(ParallelError::Shape("inconsistent shard shapes"));
            }
        }
        let q_spec = ShardSpec {
            axis: ShardAxis::Sequence,
            world_size: world,
            shard_lens: q.iter().map(Tensor::rows).collect(),
        };
        let kv_spec = ShardSpec {
            axis: ShardAxis::Sequence,
            world_size: world,
            shard_lens: k.iter().map(Tensor::rows).collect(),
        };
        if mask.rows() != q_spec.extent() || mask.cols() != kv_spec.extent() {
            return Err(ParallelError::Shape("mask does not cover the global problem"));
        }
        if let Some(row) = mask.first_masked_row() {
            return Err(AttentionError::MaskedRow { row }.into());
        }
        Ok(Self {
            heads,
            head_dim: width / heads,
            q_off: q_spec.offsets(),
            kv_off: kv_spec.offsets(),
            q_spec,
            kv_spec,
        })
    }

    fn head_cols(&self, t: &Tensor, h: usize) -> Result<Tensor, ParallelError> {
        Ok(t.slice_cols(h * self.head_dim, self.head_dim)?)
    }

    fn mask_for(&self, mask: &AttentionMask, q_shard: usize, kv_shard: usize) -> Result<AttentionMask, ParallelError> {
        Ok(mask.slice(
            self.q_off[q_shard],
            self.q_spec.shard_lens[q_shard],
            self.kv_off[kv_shard],
            self.kv_spec.shard_lens[kv_shard],
        )?)
    }

    /// Per-head partials of query shard `qi` against kv shard `ki`.
    fn partials(
        &self,
        mask: &AttentionMask,
        q: &Tensor,
        qi: usize,
        k: &Tensor,
        v: &Tensor,
        ki: usize,
    ) -> Result<Vec<AttentionPartial>, ParallelError> {
        let m = self.mask_for(mask, qi, ki)?;
        (0..self.heads)
            .map(|h| {
                Ok(attention_partial(
                    &self.head_cols(q, h)?,
                    &self.head_cols(k, h)?,
                    &self.head_cols(v, h)?,
                    &m,
                )?)
            })
            .collect()
    }

    fn finalize(&self, parts: &[AttentionPartial], rows: usize) -> Result<Tensor, ParallelError> {
        let mut out = Tensor::zeros(vec![rows, self.heads * self.head_dim]);
        for (h, p) in parts.iter().enumerate() {
            out.write_cols(h * self.head_dim, &p.finalize()?)?;
        }
        Ok(out)
    }
}

fn partials_to_tensors(parts: &[AttentionPartial]) -> Result<Vec<Tensor>, ParallelError> {
    let mut out = Vec::with_capacity(parts.len() * 3);
    for p in parts {
        let n = p.queries();
        out.push(p.acc.clone());
        out.push(Tensor::new(vec![n], p.row_max.clone())?);
        out.push(Tensor::new(vec![n], p.denom.clone())?);
    }
    Ok(out)
}

fn partials_from_tensors(ts: &mut impl Iterator<Item = Tensor>, heads: usize) -> Result<Vec<AttentionPartial>, ParallelError> {
    (0..heads)
        .map(|_| {
            let acc = ts.next().ok_or(ParallelError::Shape("truncated partial"))?;
            let row_max = ts.next().ok_or(ParallelError::Shape("truncated partial"))?.into_data();
            let denom = ts.next().ok_or(ParallelError::Shape("truncated partial"))?.into_data();
            Ok(AttentionPartial { acc, row_max, denom })
        })
        .collect()
}

fn merge_all(a: &[AttentionPartial], b: &[AttentionPartial]) -> Result<Vec<AttentionPartial>, ParallelError> {
    a.iter().zip(b).map(|(x, y)| Ok(merge_partials(x, y)?)).collect()
}

// ---------------------------------------------------------------------------
// Ulysses

struct UlyssesWorker<'m> {
    layout: Layout,
    mask: &'m AttentionMask,
    q: Tensor,
    k: Tensor,
    v: Tensor,
    out: Option<Tensor>,
}

impl WorkerProgram for UlyssesWorker<'_> {
    type Output = Tensor;

    fn step(&mut self, ctx: &mut StepContext<'_>) -> Result<StepStatus, ParallelError> {
        let l = &self.layout;
        let hpw = l.heads / ctx.world;
        let cols = hpw * l.head_dim;
        match ctx.step {
            0 => {
                for j in 0..ctx.world {
                    let c0 = j * cols;
                    let tensors = vec![
                        self.q.slice_cols(c0, cols)?,
                        self.k.slice_cols(c0, cols)?,
                        self.v.slice_cols(c0, cols)?,
                    ];
                    ctx.send(j, Payload::new(0, tensors));
                }
                Ok(StepStatus::Continue)
            }
            1 => {
                let mut qs = Vec::new();
                let mut ks = Vec::new();
                let mut vs = Vec::new();
                for i in 0..ctx.world {
                    let mut it = ctx.recv(i)?.tensors.into_iter();
                    qs.push(it.next().ok_or(ParallelError::Shape("ulysses payload"))?);
                    ks.push(it.next().ok_or(ParallelError::Shape("ulysses payload"))?);
                    vs.push(it.next().ok_or(ParallelError::Shape("ulysses payload"))?);
                }
                let (q, k, v) = (gather_rows(&qs)?, gather_rows(&ks)?, gather_rows(&vs)?);
                let mut local = Tensor::zeros(vec![q.rows(), cols]);
                for h in 0..hpw {
                    let o = scaled_dot_attention(
                        &q.slice_cols(h * l.head_dim, l.head_dim)?,
                        &k.slice_cols(h * l.head_dim, l.head_dim)?,
                        &v.slice_cols(h * l.head_dim, l.head_dim)?,
                        self.mask,
                    )?;
                    local.write_cols(h * l.head_dim, &o)?;
                }
                for j in 0..ctx.world {
                    let rows = local.slice_rows(l.q_off[j], l.q_spec.shard_lens[j])?;
                    ctx.send(j, Payload::new(1, vec![rows]));
                }
                Ok(StepStatus::Continue)
            }
            _ => {
                let mut out = Tensor::zeros(vec![self.q.rows(), l.heads * l.head_dim]);
                for i in 0..ctx.world {
                    let p = ctx.recv(i)?;
                    out.write_cols(i * cols, &p.tensors[0])?;
                }
                self.out = Some(out);
                Ok(StepStatus::Done)
            }
        }
    }

    fn finish(self) -> Result<Tensor, ParallelError> {
        self.out.ok_or(ParallelError::Shape("ulysses worker produced no output"))
    }
}

/// Ulysses sequence parallelism. Inputs and outputs are per-worker sequence shards.
pub fn ulysses_attention<E: Executor>(
    exec: &E,
    q: &[Tensor],
    k: &[Tensor],
    v: &[Tensor],
    heads: usize,
    mask: &AttentionMask,
) -> Result<(Vec<Tensor>, Trace), ParallelError> {
    let layout = Layout::new(q, k, v, heads, mask)?;
    let world = q.len();
    if !heads.is_multiple_of(world) {
        return Err(ParallelError::HeadsNotDivisible { heads, world });
    }
    let programs = (0..world)
        .map(|r| UlyssesWorker {
            layout: layout.clone(),
            mask,
            q: q[r].clone(),
            k: k[r].clone(),
            v: v[r].clone(),
            out: None,
        })
        .collect();
    exec.run(programs)
}

// ---------------------------------------------------------------------------
// Ring, pass K/V

struct RingKvWorker<'m> {
    layout: Layout,
    mask: &'m AttentionMask,
    q: Tensor,
    k: Tensor,
    v: Tensor,
    acc: Vec<AttentionPartial>,
    out: Option<Tensor>,
}

impl WorkerProgram for RingKvWorker<'_> {
    type Output = Tensor;

    fn step(&mut self, ctx: &mut StepContext<'_>) -> Result<StepStatus, ParallelError> {
        let r = ctx.rank;
        let (k, v, shard) = if ctx.step == 0 {
            (self.k.clone(), self.v.clone(), r)
        } else {
            let pred = ctx.predecessor();
            let p = ctx.recv(pred)?;
            let mut it = p.tensors.into_iter();
            let k = it.next().ok_or(ParallelError::Shape("kv payload"))?;
            let v = it.next().ok_or(ParallelError::Shape("kv payload"))?;
            (k, v, p.tag as usize)
        };
        let parts = self.layout.partials(self.mask, &self.q, r, &k, &v, shard)?;
        self.acc = if self.acc.is_empty() { parts } else { merge_all(&self.acc, &parts)? };
        if ctx.step + 1 < ctx.world {
            let succ = ctx.successor();
            ctx.send(succ, Payload::new(shard as u32, vec![k, v]));
            Ok(StepStatus::Continue)
        } else {
            self.out = Some(self.layout.finalize(&self.acc, self.q.rows())?);
            Ok(StepStatus::Done)
        }
    }

    fn finish(self) -> Result<Tensor, ParallelError> {
        self.out.ok_or(ParallelError::Shape("ring worker produced no output"))
    }
}

/// Ring attention where K/V shards rotate and queries stay with their owner.
pub fn ring_attention_pass_kv<E: Executor>(
    exec: &E,
    q: &[Tensor],
    k: &[Tensor],
    v: &[Tensor],
    heads: usize,
    mask: &AttentionMask,
) -> Result<(Vec<Tensor>, Trace), ParallelError> {
    let layout = Layout::new(q, k, v, heads, mask)?;
    let programs = (0..q.len())
        .map(|r| RingKvWorker {
            layout: layout.clone(),
            mask,
            q: q[r].clone(),
            k: k[r].clone(),
            v: v[r].clone(),
            acc: Vec::new(),
            out: None,
        })
        .collect();
    exec.run(programs)
}

// ---------------------------------------------------------------------------
// Ring, pass Q

struct RingQWorker<'m> {
    layout: Layout,
    mask: &'m AttentionMask,
    q: Tensor,
    k: Tensor,
    v: Tensor,
    out: Option<Tensor>,
}

impl WorkerProgram for RingQWorker<'_> {
    type Output = Tensor;

    fn step(&mut self, ctx: &mut StepContext<'_>) -> Result<StepStatus, ParallelError> {
        let (r, w) = (ctx.rank, ctx.world);
        let heads = self.layout.heads;
        if ctx.step == 0 {
            let parts = self.layout.partials(self.mask, &self.q, r, &self.k, &self.v, r)?;
            if w == 1 {
                self.out = Some(self.layout.finalize(&parts, self.q.rows())?);
                return Ok(StepStatus::Done);
            }
            let mut tensors = vec![self.q.clone()];
            tensors.extend(partials_to_tensors(&parts)?);
            let succ = ctx.successor();
            ctx.send(succ, Payload::new(r as u32, tensors));
            return Ok(StepStatus::Continue);
        }
        let pred = ctx.predecessor();
        if ctx.step == w {
            // our own queries coming home
            let p = ctx.recv(pred)?;
            let parts = partials_from_tensors(&mut p.tensors.into_iter(), heads)?;
            self.out = Some(self.layout.finalize(&parts, self.q.rows())?);
            return Ok(StepStatus::Done);
        }
        let p = ctx.recv(pred)?;
        let origin = p.tag as usize;
        let mut it = p.tensors.into_iter();
        let q = it.next().ok_or(ParallelError::Shape("q payload"))?;
        let carried = partials_from_tensors(&mut it, heads)?;
        let local = self.layout.partials(self.mask, &q, origin, &self.k, &self.v, r)?;
        let merged = merge_all(&carried, &local)?;
        let succ = ctx.successor();
        if ctx.step + 1 < w {
            let mut tensors = vec![q];
            tensors.extend(partials_to_tensors(&merged)?);
            ctx.send(succ, Payload::new(origin as u32, tensors));
        } else {
            // after W-1 hops the successor is the owner
            ctx.send(succ, Payload::new(origin as u32, partials_to_tensors(&merged)?));
        }
        Ok(StepStatus::Continue)
    }

    fn finish(self) -> Result<Tensor, ParallelError> {
        self.out.ok_or(ParallelError::Shape("ring worker produced no output"))
    }
}

/// Ring attention where query shards (with running partials) rotate and K/V stay put.
pub fn ring_attention_pass_q<E: Executor>(
    exec: &E,
    q: &[Tensor],
    k: &[Tensor],
    v: &[Tensor],
    heads: usize,
    mask: &AttentionMask,
) -> Result<(Vec<Tensor>, Trace), ParallelError> {
    let layout = Layout::new(q, k, v, heads, mask)?;
    let programs = (0..q.len())
        .map(|r| RingQWorker {
            layout: layout.clone(),
            mask,
            q: q[r].clone(),
            k: k[r].clone(),
            v: v[r].clone(),
            out: None,
        })
        .collect();
    exec.run(programs)
}

// ---------------------------------------------------------------------------
// strategy selection

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Strategy {
    Ulysses,
    RingPassKv,
    RingPassQ,
}

impl Strategy {
    /// Candidate order; also the tie-break order.
    pub const ALL: [Strategy; 3] = [Strategy::Ulysses, Strategy::RingPassKv, Strategy::RingPassQ];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::Ulysses => "ulysses",
            Strategy::RingPassKv => "ring_pass_kv",
            Strategy::RingPassQ => "ring_pass_q",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|st| st.name() == s)
    }
}

/// `cost = per_message * messages + per_byte * bytes`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LinkCostModel {
    pub per_message: f64,
    pub per_byte: f64,
}

impl Default for LinkCostModel {
    fn default() -> Self {
        // 10 µs latency, 10 GB/s
        Self {
            per_message: 1e-5,
            per_byte: 1e-10,
        }
    }
}

/// Shape of one attention call to be parallelised.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AttentionProblem {
    pub q_len: usize,
    pub kv_len: usize,
    pub heads: usize,
    pub head_dim: usize,
    pub world_size: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Traffic {
    pub messages: usize,
    pub bytes: usize,
}

impl Traffic {
    pub fn cost(&self, model: &LinkCostModel) -> f64 {
        model.per_message * self.messages as f64 + model.per_byte * self.bytes as f64
    }
}

pub fn feasible(strategy: Strategy, p: &AttentionProblem) -> bool {
    match strategy {
        Strategy::Ulysses => p.world_size > 0 && p.heads.is_multiple_of(p.world_size),
        _ => p.world_size > 0,
    }
}

/// Wire traffic a strategy generates; equals the measured trace exactly.
pub fn predicted_traffic(strategy: Strategy, p: &AttentionProblem) -> Traffic {
    let w = p.world_size;
    if w <= 1 {
        return Traffic::default();
    }
    let f = core::mem::size_of::<f32>();
    let (h, d) = (p.heads, p.head_dim);
    match strategy {
        Strategy::Ulysses => {
            let hpw = h / w;
            Traffic {
                messages: 2 * w * (w - 1),
                bytes: f * (w - 1) * hpw * d * 2 * (p.q_len + p.kv_len),
            }
        }
        Strategy::RingPassKv => Traffic {
            messages: w * (w - 1),
            bytes: f * (w - 1) * 2 * p.kv_len * h * d,
        },
        Strategy::RingPassQ => Traffic {
            messages: w * (w - 1) + w,
            bytes: f * ((w - 1) * p.q_len * h * (2 * d + 2) + p.q_len * h * (d + 2)),
        },
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StrategyChoice {
    pub strategy: Strategy,
    pub traffic: Traffic,
    pub cost: f64,
}

/// Cheapest feasible strategy under `model`; ties go to the earlier entry of [`Strategy::ALL`].
pub fn choose_strategy(p: &AttentionProblem, model: &LinkCostModel) -> StrategyChoice {
    let mut best: Option<StrategyChoice> = None;
    for s in Strategy::ALL {
        if !feasible(s, p) {
            continue;
        }
        let traffic = predicted_traffic(s, p);
        let cost = traffic.cost(model);
        if best.is_none_or(|b| cost < b.cost) {
            best = Some(StrategyChoice {
                strategy: s,
                traffic,
                cost,
            });
        }
    }
    // ring variants are always feasible
    best.expect("at least one strategy is feasible")
}

/// Run `strategy` on full (unsharded) tensors: split, execute, gather.
pub fn run_strategy<E: Executor>(
    exec: &E,
    strategy: Strategy,
    world: usize,
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    heads: usize,
    mask: &AttentionMask,
) -> Result<(Tensor, Trace), ParallelError> {
    let qs = ShardSpec::even(ShardAxis::Sequence, q.rows(), world)?.split_rows(q)?;
    let kv_spec = ShardSpec::even(ShardAxis::Sequence, k.rows(), world)?;
    let ks = kv_spec.split_rows(k)?;
    let vs = kv_spec.split_rows(v)?;
    let (outs, trace) = match strategy {
        Strategy::Ulysses => ulysses_attention(exec, &qs, &ks, &vs, heads, mask)?,
        Strategy::RingPassKv => ring_attention_pass_kv(exec, &qs, &ks, &vs, heads, mask)?,
        Strategy::RingPassQ => ring_attention_pass_q(exec, &qs, &ks, &vs, heads, mask)?,
    };
    Ok((gather_rows(&outs)?, trace))
}

/// Dense single-worker reference for the same problem.
pub fn dense_attention(q: &Tensor, k: &Tensor, v: &Tensor, heads: usize, mask: &AttentionMask) -> Result<Tensor, ParallelError> {
    Ok(multi_head_attention(q, k, v, heads, mask)?)
}

/// Running totals of simulated traffic, shareable across calls.
#[derive(Debug, Default)]
pub struct TrafficCounter {
    messages: AtomicU64,
    bytes: AtomicU64,
}

impl TrafficCounter {
    pub fn add(&self, trace: &Trace) {
        self.messages.fetch_add(trace.wire_messages() as u64, Ordering::Relaxed);
        self.bytes.fetch_add(trace.wire_bytes() as u64, Ordering::Relaxed);
    }

    pub fn snapshot(&self) -> Traffic {
        Traffic {
            messages: self.messages.load(Ordering::Relaxed) as usize,
            bytes: self.bytes.load(Ordering::Relaxed) as usize,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tagged(i: usize, j: usize) -> Tensor {
        Tensor::matrix(1, 1, vec![(10 * i + j) as f32]).unwrap()
    }

    #[test]
    fn all_to_all_transposes() {
        for world in [1, 2, 3] {
            let send: Vec<Vec<Tensor>> = (0..world).map(|i| (0..world).map(|j| tagged(i, j)).collect()).collect();
            let (recv, trace) = all_to_all(&Lockstep, send.clone()).unwrap();
            for i in 0..world {
                for j in 0..world {
                    assert_eq!(recv[j][i], send[i][j]);
                }
            }
            assert_eq!(trace.records.len(), world * world);
            assert_eq!(trace.bytes_sent(), trace.bytes_received);
        }
    }

    #[test]
    fn all_to_all_rejects_ragged_matrix() {
        let send = vec![vec![tagged(0, 0)], vec![tagged(1, 0), tagged(1, 1)]];
        assert!(matches!(all_to_all(&Lockstep, send), Err(ParallelError::Shape(_))));
    }

    #[test]
    fn even_shards_cover_extent() {
        let s = ShardSpec::even(ShardAxis::Sequence, 10, 4).unwrap();
        assert_eq!(s.shard_lens, vec![3, 3, 2, 2]);
        assert_eq!(s.offsets(), vec![0, 3, 6, 8]);
        assert!(ShardSpec::even(ShardAxis::Head, 4, 0).is_err());
    }

    #[test]
    fn strategy_choice_rules() {
        let p = AttentionProblem { q_len: 16, kv_len: 16, heads: 2, head_dim: 8, world_size: 1 };
        let c = choose_strategy(&p, &LinkCostModel::default());
        assert_eq!((c.strategy, c.cost), (Strategy::Ulysses, 0.0));
        let p = AttentionProblem { heads: 2, world_size: 4, ..p };
        assert!(!feasible(Strategy::Ulysses, &p));
        assert_ne!(choose_strategy(&p, &LinkCostModel::default()).strategy, Strategy::Ulysses);
        assert_eq!(Strategy::from_name("ring_pass_q"), Some(Strategy::RingPassQ));
    }
}
