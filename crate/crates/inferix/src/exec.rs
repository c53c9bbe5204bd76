//! One OS thread per simulated rank.
//!
//! Ranks compute a superstep concurrently on private inboxes, meet at a
//! barrier, then deliver their sends into the shared [`WorkerGroup`]. Per-pair
//! FIFO order is the same as under [`Lockstep`](inferix_core::parallel::Lockstep),
//! so outputs match it exactly; trace records may be logged in a different
//! order (compare with [`Trace::canonical`]).

use std::collections::VecDeque;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::{Barrier, Mutex};

use inferix_core::parallel::{
    Executor, ParallelError, Payload, StepContext, StepStatus, Trace, WorkerGroup, WorkerProgram, MAX_STEPS,
};

#[derive(Debug, Clone, Copy, Default)]
pub struct Threaded;

struct Shared {
    group: Mutex<WorkerGroup>,
    barrier: Barrier,
    done: Vec<AtomicBool>,
    failed: AtomicBool,
    error: Mutex<Option<ParallelError>>,
    leftover: AtomicUsize,
}

impl Shared {
    fn fail(&self, e: ParallelError) {
        let mut slot = self.error.lock().unwrap_or_else(|p| p.into_inner());
        slot.get_or_insert(e);
        self.failed.store(true, Ordering::SeqCst);
    }
}

fn worker<P: WorkerProgram>(rank: usize, world: usize, program: &mut P, sh: &Shared) {
    let mut inbox: Vec<VecDeque<Payload>> = (0..world).map(|_| VecDeque::new()).collect();
    let mut step = 0;
    loop {
        {
            let mut g = sh.group.lock().unwrap_or_else(|p| p.into_inner());
            for (local, shared) in inbox.iter_mut().zip(g.inbox_mut(rank)) {
                local.append(shared);
            }
        }
        let mut outbox = Vec::new();
        if !sh.done[rank].load(Ordering::SeqCst) && !sh.failed.load(Ordering::SeqCst) {
            let mut ctx = StepContext::new(rank, world, step, &mut inbox, &mut outbox);
            let res = catch_unwind(AssertUnwindSafe(|| program.step(&mut ctx)));
            let received = ctx.received_bytes();
            match res {
                Ok(Ok(status)) => {
                    sh.done[rank].store(status == StepStatus::Done, Ordering::SeqCst);
                    sh.group.lock().unwrap_or_else(|p| p.into_inner()).trace.bytes_received += received;
                }
                Ok(Err(e)) => sh.fail(e),
                Err(_) => sh.fail(ParallelError::Executor(format!("rank {rank} panicked at step {step}"))),
            }
        }
        sh.barrier.wait();
        let all_done = sh.done.iter().all(|d| d.load(Ordering::SeqCst));
        let failed = sh.failed.load(Ordering::SeqCst);
        sh.group
            .lock()
            .unwrap_or_else(|p| p.into_inner())
            .deliver(step, rank, outbox);
        sh.barrier.wait();
        step += 1;
        if failed || all_done {
            break;
        }
        if step >= MAX_STEPS {
            if rank == 0 {
                sh.fail(ParallelError::Stalled(MAX_STEPS));
            }
            break;
        }
    }
    let n: usize = inbox.iter().map(VecDeque::len).sum();
    sh.leftover.fetch_add(n, Ordering::SeqCst);
}

impl Executor for Threaded {
    fn run<P>(&self, mut programs: Vec<P>) -> Result<(Vec<P::Output>, Trace), ParallelError>
    where
        P: WorkerProgram + Send,
        P::Output: Send,
    {
        let world = programs.len();
        let sh = Shared {
            group: Mutex::new(WorkerGroup::new(world)?),
            barrier: Barrier::new(world),
            done: (0..world).map(|_| AtomicBool::new(false)).collect(),
            failed: AtomicBool::new(false),
            error: Mutex::new(None),
            leftover: AtomicUsize::new(0),
        };
        std::thread::scope(|s| {
            for (rank, program) in programs.iter_mut().enumerate() {
                let sh = &sh;
                s.spawn(move || worker(rank, world, program, sh));
            }
        });
        if let Some(e) = sh.error.into_inner().unwrap_or_else(|p| p.into_inner()) {
            return Err(e);
        }
        let group = sh.group.into_inner().unwrap_or_else(|p| p.into_inner());
        let pending = group.pending() + sh.leftover.load(Ordering::SeqCst);
        if pending > 0 {
            return Err(ParallelError::Undelivered(pending));
        }
        let outputs = programs
            .into_iter()
            .map(WorkerProgram::finish)
            .collect::<Result<Vec<_>, _>>()?;
        Ok((outputs, group.trace))
    }
}
