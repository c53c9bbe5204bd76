//! Span profiler with inline hooks and custom metrics.
//!
//! Spans are opened with [`Profiler::scoped`] and recorded when the guard
//! drops. Finished spans go into a bounded ring; when it is full the oldest
//! span is dropped and counted. A disabled profiler costs one relaxed atomic
//! load per call.

use std::borrow::Cow;
use std::cell::RefCell;
use std::collections::{BTreeMap, VecDeque};
use std::hint::black_box;
use std::marker::PhantomData;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::sync::atomic::{AtomicBool, AtomicU64, AtomicUsize, Ordering};
use std::sync::{Arc, Mutex, OnceLock, RwLock};
use std::time::{Duration, Instant};

use serde::Serialize;

pub const DEFAULT_CAPACITY: usize = 1 << 20;
pub const REPORT_VERSION: u32 = 1;
/// Minimum uninstrumented runtime accepted by [`measure_overhead`].
pub const MIN_WORKLOAD: Duration = Duration::from_millis(100);

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum ProfilerError {
    #[error("metric {name:?} has non-finite value {value}")]
    NonFinite { name: String, value: f64 },
    #[error("workload ran {0:?}, need at least {MIN_WORKLOAD:?}")]
    TooShort(Duration),
    #[error("overhead measurement needs at least one round")]
    NoRounds,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Span {
    pub id: u64,
    pub name: Cow<'static, str>,
    pub start_ns: u64,
    pub end_ns: u64,
    pub parent: Option<u64>,
    pub attrs: BTreeMap<String, f64>,
}

impl Span {
    pub fn duration_ns(&self) -> u64 {
        self.end_ns - self.start_ns
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricSample {
    pub name: String,
    pub value: f64,
    /// Name of the innermost open span, if any.
    pub scope: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum HookPoint {
    SpanStart,
    SpanEnd,
}

/// What a hook sees. `end_ns` is set only at [`HookPoint::SpanEnd`].
#[derive(Debug, Clone, Copy)]
pub struct SpanEvent<'a> {
    pub id: u64,
    pub name: &'a str,
    pub parent: Option<u64>,
    pub start_ns: u64,
    pub end_ns: Option<u64>,
}

impl SpanEvent<'_> {
    pub fn duration_ns(&self) -> Option<u64> {
        self.end_ns.map(|e| e - self.start_ns)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct HookId(u64);

type HookFn = dyn Fn(&Profiler, &SpanEvent<'_>) + Send + Sync;

#[derive(Clone)]
struct Hook {
    id: HookId,
    point: HookPoint,
    f: Arc<HookFn>,
}

/// Bounded FIFO that overwrites its oldest element.
#[derive(Debug)]
struct Ring<T> {
    items: VecDeque<T>,
    cap: usize,
    dropped: u64,
}

impl<T> Ring<T> {
    fn new(cap: usize) -> Self {
        Self {
            items: VecDeque::new(),
            cap: cap.max(1),
            dropped: 0,
        }
    }

    fn push(&mut self, item: T) {
        if self.items.len() == self.cap {
            self.items.pop_front();
            self.dropped += 1;
        }
        self.items.push_back(item);
    }
}

struct Inner {
    uid: u64,
    enabled: AtomicBool,
    epoch: Instant,
    next_span: AtomicU64,
    spans: Mutex<Ring<Span>>,
    metrics: Mutex<Ring<MetricSample>>,
    hooks: RwLock<Arc<Vec<Hook>>>,
    hook_count: AtomicUsize,
    next_hook: AtomicU64,
    hook_panics: AtomicU64,
}

static NEXT_PROFILER: AtomicU64 = AtomicU64::new(1);

thread_local! {
    /// Open spans on this thread: (profiler uid, span id, name).
    static STACK: RefCell<Vec<(u64, u64, Cow<'static, str>)>> = const { RefCell::new(Vec::new()) };
}

/// Cheap to clone; clones share recorded data.
#[derive(Clone)]
pub struct Profiler {
    inner: Arc<Inner>,
}

impl std::fmt::Debug for Profiler {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Profiler")
            .field("enabled", &self.is_enabled())
            .field("hooks", &self.inner.hook_count.load(Ordering::Relaxed))
            .finish()
    }
}

impl Default for Profiler {
    fn default() -> Self {
        Self::new(true)
    }
}

impl Profiler {
    pub fn new(enabled: bool) -> Self {
        Self::with_capacity(enabled, DEFAULT_CAPACITY)
    }

    pub fn with_capacity(enabled: bool, capacity: usize) -> Self {
        Self {
            inner: Arc::new(Inner {
                uid: NEXT_PROFILER.fetch_add(1, Ordering::Relaxed),
                enabled: AtomicBool::new(enabled),
                epoch: Instant::now(),
                next_span: AtomicU64::new(1),
                spans: Mutex::new(Ring::new(capacity)),
                metrics: Mutex::new(Ring::new(capacity)),
                hooks: RwLock::new(Arc::new(Vec::new())),
                hook_count: AtomicUsize::new(0),
                next_hook: AtomicU64::new(1),
                hook_panics: AtomicU64::new(0),
            }),
        }
    }

    /// Process-wide instance, disabled until [`Profiler::set_enabled`].
    pub fn global() -> &'static Profiler {
        static GLOBAL: OnceLock<Profiler> = OnceLock::new();
        GLOBAL.get_or_init(|| Profiler::new(false))
    }

    pub fn is_enabled(&self) -> bool {
        self.inner.enabled.load(Ordering::Relaxed)
    }

    pub fn set_enabled(&self, on: bool) {
        self.inner.enabled.store(on, Ordering::Relaxed);
    }

    #[inline]
    fn now_ns(&self) -> u64 {
        self.inner.epoch.elapsed().as_nanos() as u64
    }

    /// Open a span; it is recorded when the guard drops.
    #[inline]
    pub fn scoped(&self, name: impl Into<Cow<'static, str>>) -> SpanGuard<'_> {
        if !self.is_enabled() {
            return SpanGuard {
                profiler: self,
                open: None,
                _not_send: PhantomData,
            };
        }
        self.open(name.into())
    }

    fn open(&self, name: Cow<'static, str>) -> SpanGuard<'_> {
        let id = self.inner.next_span.fetch_add(1, Ordering::Relaxed);
        let uid = self.inner.uid;
        let parent = STACK.with(|s| {
            let mut s = s.borrow_mut();
            let parent = s.iter().rev().find(|e| e.0 == uid).map(|e| e.1);
            s.push((uid, id, name.clone()));
            parent
        });
        let start_ns = self.now_ns();
        if self.inner.hook_count.load(Ordering::Relaxed) > 0 {
            self.fire(
                HookPoint::SpanStart,
                &SpanEvent {
                    id,
                    name: &name,
                    parent,
                    start_ns,
                    end_ns: None,
                },
            );
        }
        SpanGuard {
            profiler: self,
            open: Some(OpenSpan {
                id,
                name,
                parent,
                start_ns,
                attrs: BTreeMap::new(),
            }),
            _not_send: PhantomData,
        }
    }

    fn close(&self, span: OpenSpan) {
        let end_ns = self.now_ns();
        if self.inner.hook_count.load(Ordering::Relaxed) > 0 {
            self.fire(
                HookPoint::SpanEnd,
                &SpanEvent {
                    id: span.id,
                    name: &span.name,
                    parent: span.parent,
                    start_ns: span.start_ns,
                    end_ns: Some(end_ns),
                },
            );
        }
        // hooks ran inside the span so their metrics are attributed to it
        let uid = self.inner.uid;
        STACK.with(|s| {
            let mut s = s.borrow_mut();
            if let Some(pos) = s.iter().rposition(|e| e.0 == uid && e.1 == span.id) {
                s.remove(pos);
            }
        });
        let rec = Span {
            id: span.id,
            name: span.name,
            start_ns: span.start_ns,
            end_ns,
            parent: span.parent,
            attrs: span.attrs,
        };
        lock(&self.inner.spans).push(rec);
    }

    fn fire(&self, point: HookPoint, ev: &SpanEvent<'_>) {
        let hooks = self.inner.hooks.read().unwrap_or_else(|e| e.into_inner()).clone();
        for h in hooks.iter().filter(|h| h.point == point) {
            if catch_unwind(AssertUnwindSafe(|| (h.f)(self, ev))).is_err() {
                self.inner.hook_panics.fetch_add(1, Ordering::Relaxed);
            }
        }
    }

    /// Record a custom value under the innermost open span on this thread,
    /// or globally when none is open. Ignored while disabled.
    pub fn record_metric(&self, name: &str, value: f64) -> Result<(), ProfilerError> {
        if !value.is_finite() {
            return Err(ProfilerError::NonFinite {
                name: name.to_string(),
                value,
            });
        }
        if !self.is_enabled() {
            return Ok(());
        }
        let uid = self.inner.uid;
        let scope = STACK.with(|s| s.borrow().iter().rev().find(|e| e.0 == uid).map(|e| e.2.to_string()));
        lock(&self.inner.metrics).push(MetricSample {
            name: name.to_string(),
            value,
            scope,
        });
        Ok(())
    }

    /// Hooks run inline on the recording thread. A panicking hook is caught
    /// and counted in [`ProfileReport::hook_panics`].
    pub fn register_hook<F>(&self, point: HookPoint, f: F) -> HookId
    where
        F: Fn(&Profiler, &SpanEvent<'_>) + Send + Sync + 'static,
    {
        let id = HookId(self.inner.next_hook.fetch_add(1, Ordering::Relaxed));
        let mut hooks = self.inner.hooks.write().unwrap_or_else(|e| e.into_inner());
        let mut next: Vec<Hook> = hooks.to_vec();
        next.push(Hook { id, point, f: Arc::new(f) });
        self.inner.hook_count.store(next.len(), Ordering::Relaxed);
        *hooks = Arc::new(next);
        id
    }

    /// Returns false if the id was not registered.
    pub fn unregister_hook(&self, id: HookId) -> bool {
        let mut hooks = self.inner.hooks.write().unwrap_or_else(|e| e.into_inner());
        let next: Vec<Hook> = hooks.iter().filter(|h| h.id != id).cloned().collect();
        let found = next.len() != hooks.len();
        self.inner.hook_count.store(next.len(), Ordering::Relaxed);
        *hooks = Arc::new(next);
        found
    }

    pub fn hook_panics(&self) -> u64 {
        self.inner.hook_panics.load(Ordering::Relaxed)
    }

    pub fn dropped_spans(&self) -> u64 {
        lock(&self.inner.spans).dropped
    }

    /// Copy of the recorded spans, oldest first.
    pub fn spans(&self) -> Vec<Span> {
        lock(&self.inner.spans).items.iter().cloned().collect()
    }

    pub fn metrics(&self) -> Vec<MetricSample> {
        lock(&self.inner.metrics).items.iter().cloned().collect()
    }

    /// Drop everything recorded so far; hooks stay registered.
    pub fn reset(&self) {
        let mut s = lock(&self.inner.spans);
        s.items.clear();
        s.dropped = 0;
        drop(s);
        let mut m = lock(&self.inner.metrics);
        m.items.clear();
        m.dropped = 0;
        self.inner.hook_panics.store(0, Ordering::Relaxed);
    }

    pub fn report(&self, format: ReportFormat) -> ProfileReport {
        let (spans, dropped) = {
            let s = lock(&self.inner.spans);
            (s.items.iter().cloned().collect::<Vec<_>>(), s.dropped)
        };
        let metrics = self.metrics();
        ProfileReport::build(spans, &metrics, dropped, self.hook_panics(), format)
    }
}

fn lock<T>(m: &Mutex<T>) -> std::sync::MutexGuard<'_, T> {
    m.lock().unwrap_or_else(|e| e.into_inner())
}

#[derive(Debug)]
struct OpenSpan {
    id: u64,
    name: Cow<'static, str>,
    parent: Option<u64>,
    start_ns: u64,
    attrs: BTreeMap<String, f64>,
}

/// Records its span on drop. Not `Send`: spans stay on the thread that opened them.
#[must_use = "the span ends when the guard is dropped"]
#[derive(Debug)]
pub struct SpanGuard<'a> {
    profiler: &'a Profiler,
    open: Option<OpenSpan>,
    _not_send: PhantomData<*const ()>,
}

impl SpanGuard<'_> {
    pub fn id(&self) -> Option<u64> {
        self.open.as_ref().map(|s| s.id)
    }

    pub fn attr(&mut self, key: &str, value: f64) {
        if let Some(s) = &mut self.open {
            s.attrs.insert(key.to_string(), value);
        }
    }
}

impl Drop for SpanGuard<'_> {
    fn drop(&mut self) {
        if let Some(s) = self.open.take() {
            self.profiler.close(s);
        }
    }
}

// ---------------------------------------------------------------------------
// reports

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ReportFormat {
    #[default]
    Summary,
    /// Summary plus every recorded span and metric sample.
    Full,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SpanAggregate {
    pub name: String,
    pub count: u64,
    pub total_ns: u64,
    pub mean_ns: f64,
    pub p50_ns: u64,
    pub p95_ns: u64,
    pub min_ns: u64,
    pub max_ns: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricAggregate {
    pub name: String,
    /// Span name the samples were recorded under, or `"global"`.
    pub scope: String,
    pub count: u64,
    pub sum: f64,
    pub mean: f64,
    pub min: f64,
    pub max: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ProfileReport {
    pub version: u32,
    /// From the first recorded span start to the last span end.
    pub wall_time_ns: u64,
    pub dropped_spans: u64,
    pub hook_panics: u64,
    pub spans: Vec<SpanAggregate>,
    pub metrics: Vec<MetricAggregate>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub raw_spans: Option<Vec<Span>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub raw_metrics: Option<Vec<MetricSample>>,
}

/// Nearest-rank percentile of sorted samples.
pub fn nearest_rank(sorted: &[u64], p: f64) -> u64 {
    if sorted.is_empty() {
        return 0;
    }
    let n = sorted.len();
    let rank = ((p / 100.0) * n as f64).ceil() as usize;
    sorted[rank.clamp(1, n) - 1]
}

impl ProfileReport {
    fn build(spans: Vec<Span>, metrics: &[MetricSample], dropped: u64, hook_panics: u64, format: ReportFormat) -> Self {
        let mut by_name: BTreeMap<&str, Vec<u64>> = BTreeMap::new();
        for s in &spans {
            by_name.entry(&s.name).or_default().push(s.duration_ns());
        }
        let span_aggs = by_name
            .into_iter()
            .map(|(name, mut d)| {
                d.sort_unstable();
                let total: u64 = d.iter().sum();
                SpanAggregate {
                    name: name.to_string(),
                    count: d.len() as u64,
                    total_ns: total,
                    mean_ns: total as f64 / d.len() as f64,
                    p50_ns: nearest_rank(&d, 50.0),
                    p95_ns: nearest_rank(&d, 95.0),
                    min_ns: d[0],
                    max_ns: d[d.len() - 1],
                }
            })
            .collect();

        let mut by_metric: BTreeMap<(&str, &str), Vec<f64>> = BTreeMap::new();
        for m in metrics {
            let scope = m.scope.as_deref().unwrap_or("global");
            by_metric.entry((&m.name, scope)).or_default().push(m.value);
        }
        let metric_aggs = by_metric
            .into_iter()
            .map(|((name, scope), v)| {
                let sum: f64 = v.iter().sum();
                MetricAggregate {
                    name: name.to_string(),
                    scope: scope.to_string(),
                    count: v.len() as u64,
                    sum,
                    mean: sum / v.len() as f64,
                    min: v.iter().copied().fold(f64::INFINITY, f64::min),
                    max: v.iter().copied().fold(f64::NEG_INFINITY, f64::max),
                }
            })
            .collect();

        let wall_time_ns = match (spans.iter().map(|s| s.start_ns).min(), spans.iter().map(|s| s.end_ns).max()) {
            (Some(a), Some(b)) => b - a,
            _ => 0,
        };
        let full = format == ReportFormat::Full;
        Self {
            version: REPORT_VERSION,
            wall_time_ns,
            dropped_spans: dropped,
            hook_panics,
            spans: span_aggs,
            metrics: metric_aggs,
            raw_metrics: full.then(|| metrics.to_vec()),
            raw_spans: full.then_some(spans),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.spans.is_empty() && self.metrics.is_empty()
    }

    pub fn span(&self, name: &str) -> Option<&SpanAggregate> {
        self.spans.iter().find(|s| s.name == name)
    }

    pub fn metric(&self, name: &str, scope: &str) -> Option<&MetricAggregate> {
        self.metrics.iter().find(|m| m.name == name && m.scope == scope)
    }

    /// Tab-separated text: `#` metadata lines, then one span aggregate per line,
    /// then a `# metrics` section.
    pub fn to_tsv(&self) -> String {
        use std::fmt::Write;
        let mut out = String::new();
        let _ = writeln!(out, "# inferix-profile\tv{}", self.version);
        let _ = writeln!(out, "# wall_time_ns\t{}", self.wall_time_ns);
        let _ = writeln!(out, "# dropped_spans\t{}", self.dropped_spans);
        let _ = writeln!(out, "# hook_panics\t{}", self.hook_panics);
        out.push_str("name\tcount\ttotal_ns\tmean_ns\tp50_ns\tp95_ns\tmax_ns\n");
        for s in &self.spans {
            let _ = writeln!(
                out,
                "{}\t{}\t{}\t{:.1}\t{}\t{}\t{}",
                s.name, s.count, s.total_ns, s.mean_ns, s.p50_ns, s.p95_ns, s.max_ns
            );
        }
        out.push_str("# metrics\nname\tscope\tcount\tsum\tmean\tmin\tmax\n");
        for m in &self.metrics {
            let _ = writeln!(
                out,
                "{}\t{}\t{}\t{}\t{}\t{}\t{}",
                m.name, m.scope, m.count, m.sum, m.mean, m.min, m.max
            );
        }
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// Flat `(key, value)` view used for METRICS stream messages.
    pub fn snapshot_values(&self) -> Vec<(String, f64)> {
        let mut out = Vec::new();
        for s in &self.spans {
            out.push((format!("span.{}.count", s.name), s.count as f64));
            out.push((format!("span.{}.mean_ns", s.name), s.mean_ns));
        }
        for m in &self.metrics {
            out.push((format!("metric.{}.{}.mean", m.scope, m.name), m.mean));
        }
        out
    }
}

// ---------------------------------------------------------------------------
// overhead measurement

/// A deterministic CPU-bound loop split into equal units.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Workload {
    pub units: usize,
    pub iters_per_unit: u64,
}

#[inline(never)]
pub fn work_unit(iters: u64) -> u64 {
    let mut x = black_box(0x9e37_79b9_7f4a_7c15u64);
    for i in 0..iters {
        x ^= x << 13;
        x ^= x >> 7;
        x ^= x << 17;
        x = x.wrapping_add(i);
    }
    black_box(x)
}

impl Workload {
    /// Size units so one takes about `unit`, with `units` of them.
    pub fn calibrate(unit: Duration, units: usize) -> Self {
        let mut iters = 1024u64;
        loop {
            let t = Instant::now();
            black_box(work_unit(iters));
            let el = t.elapsed();
            if el >= Duration::from_millis(5) || iters >= 1 << 34 {
                let per_iter = el.as_secs_f64() / iters as f64;
                let n = (unit.as_secs_f64() / per_iter).round().max(1.0) as u64;
                return Self {
                    units,
                    iters_per_unit: n,
                };
            }
            iters *= 2;
        }
    }

    /// About 10 µs per unit and 200 ms per run.
    pub fn standard() -> Self {
        Self::calibrate(Duration::from_micros(10), 20_000)
    }

    pub fn run_plain(&self) -> u64 {
        let mut acc = 0u64;
        for _ in 0..self.units {
            acc = acc.wrapping_add(work_unit(self.iters_per_unit));
        }
        acc
    }

    /// Same work with one span per unit.
    pub fn run_instrumented(&self, p: &Profiler) -> u64 {
        let mut acc = 0u64;
        for _ in 0..self.units {
            let _s = p.scoped("work_unit");
            acc = acc.wrapping_add(work_unit(self.iters_per_unit));
        }
        acc
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct OverheadReport {
    pub ratio: f64,
    pub plain_ns: u64,
    pub instrumented_ns: u64,
    pub rounds: usize,
    pub units: usize,
    pub iters_per_unit: u64,
}

/// Best-of-`rounds` instrumented time over best-of-`rounds` plain time.
/// Rounds alternate between the two so drift hits both equally.
pub fn measure_overhead(p: &Profiler, w: &Workload, rounds: usize) -> Result<OverheadReport, ProfilerError> {
    if rounds == 0 {
        return Err(ProfilerError::NoRounds);
    }
    // warm caches and the span ring
    black_box(w.run_plain());
    black_box(w.run_instrumented(p));
    let mut plain = Duration::MAX;
    let mut inst = Duration::MAX;
    for _ in 0..rounds {
        let t = Instant::now();
        black_box(w.run_plain());
        plain = plain.min(t.elapsed());
        let t = Instant::now();
        black_box(w.run_instrumented(p));
        inst = inst.min(t.elapsed());
    }
    if plain < MIN_WORKLOAD {
        return Err(ProfilerError::TooShort(plain));
    }
    Ok(OverheadReport {
        ratio: inst.as_secs_f64() / plain.as_secs_f64(),
        plain_ns: plain.as_nanos() as u64,
        instrumented_ns: inst.as_nanos() as u64,
        rounds,
        units: w.units,
        iters_per_unit: w.iters_per_unit,
    })
}
