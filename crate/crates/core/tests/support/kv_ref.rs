//! Contiguous reference store for differential testing of the paged cache.
//!
//! Keeps every appended row in a plain vector per (layer, kind) and predicts
//! results, errors and page counts from first principles. Tiers are not
//! modelled; tier behaviour is checked through invariants instead.

use core::ops::Range;

use inferix_core::kv::{EntryKind, KvCache, KvConfig, KvError, LatentMode, Tier};
use inferix_core::Tensor;
use rand::Rng;

use super::rand_tensor;

#[derive(Debug, Default, Clone)]
struct Stream {
    k: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
    base: usize,
    start: usize,
}

impl Stream {
    fn end(&self) -> usize {
        self.k.len()
    }

    fn pages(&self, page_len: usize) -> usize {
        (self.end() - self.base).div_ceil(page_len)
    }
}

#[derive(Debug, Clone)]
struct Entry {
    id: u64,
    layer: usize,
    kind: EntryKind,
    range: Range<usize>,
}

pub struct RefStore {
    config: KvConfig,
    streams: Vec<[Stream; 2]>,
    entries: Vec<Entry>,
    next_id: u64,
}

fn slot(kind: EntryKind) -> usize {
    match kind {
        EntryKind::SelfAttn => 0,
        EntryKind::CrossAttn => 1,
    }
}

impl RefStore {
    pub fn new(config: KvConfig) -> Self {
        let streams = (0..config.num_layers).map(|_| Default::default()).collect();
        Self {
            config,
            streams,
            entries: Vec::new(),
            next_id: 0,
        }
    }

    fn layer_err(&self, layer: usize) -> Result<(), KvError> {
        if layer >= self.config.num_layers {
            return Err(KvError::Layer {
                layer,
                num_layers: self.config.num_layers,
            });
        }
        Ok(())
    }

    pub fn pages_used(&self) -> usize {
        self.streams
            .iter()
            .flat_map(|s| s.iter())
            .map(|s| s.pages(self.config.page_len))
            .sum()
    }

    pub fn append(&mut self, layer: usize, k: &Tensor, v: &Tensor) -> Result<u64, KvError> {
        self.append_kind(layer, k, v, EntryKind::SelfAttn)
    }

    pub fn append_kind(&mut self, layer: usize, k: &Tensor, v: &Tensor, kind: EntryKind) -> Result<u64, KvError> {
        self.layer_err(layer)?;
        let d = self.config.head_dim;
        if k.cols() != d {
            return Err(KvError::Width {
                expected: d,
                got: k.cols(),
            });
        }
        let t = k.rows();
        if t == 0 {
            return Err(KvError::EmptyAppend);
        }
        if self.config.capacity_pages_device == 0 {
            return Err(KvError::NoDeviceCapacity);
        }
        let pl = self.config.page_len;
        let s = &self.streams[layer][slot(kind)];
        let used_in_last = (s.end() - s.base) % pl;
        let room = if used_in_last == 0 { 0 } else { pl - used_in_last };
        let needed = t.saturating_sub(room).div_ceil(pl);
        let available = self.config.capacity_pages_device + self.config.capacity_pages_host - self.pages_used();
        if needed > available {
            return Err(KvError::OutOfMemory { needed, available });
        }
        let s = &mut self.streams[layer][slot(kind)];
        let start = s.end();
        for i in 0..t {
            s.k.push(k.row(i).to_vec());
            s.v.push(v.row(i).to_vec());
        }
        let id = self.next_id;
        self.next_id += 1;
        self.entries.push(Entry {
            id,
            layer,
            kind,
            range: start..start + t,
        });
        Ok(id)
    }

    fn expand(&self, rows: &[Vec<f32>]) -> Tensor {
        let d = self.config.head_dim;
        let t = Tensor::matrix(rows.len(), d, rows.concat()).unwrap();
        match &self.config.latent {
            LatentMode::Off => t,
            LatentMode::On { down_proj, up_proj, .. } => t
                .matmul(&down_proj.transpose().unwrap())
                .unwrap()
                .matmul(&up_proj.transpose().unwrap())
                .unwrap(),
        }
    }

    pub fn fetch_range(&self, layer: usize, kind: EntryKind, r: Range<usize>) -> Result<(Tensor, Tensor), KvError> {
        self.layer_err(layer)?;
        let s = &self.streams[layer][slot(kind)];
        if r.start > r.end || (!r.is_empty() && (r.start < s.start || r.end > s.end())) {
            return Err(KvError::OutOfBounds {
                start: r.start,
                end: r.end,
                lo: s.start,
                hi: s.end(),
            });
        }
        if r.is_empty() {
            return Ok((self.expand(&[]), self.expand(&[])));
        }
        Ok((self.expand(&s.k[r.clone()]), self.expand(&s.v[r])))
    }

    pub fn fetch_indices(&self, layer: usize, idx: &[usize]) -> Result<(Tensor, Tensor), KvError> {
        self.layer_err(layer)?;
        let s = &self.streams[layer][0];
        if let Some(&b) = idx.iter().find(|&&i| i < s.start || i >= s.end()) {
            return Err(KvError::OutOfBounds {
                start: b,
                end: b + 1,
                lo: s.start,
                hi: s.end(),
            });
        }
        let k: Vec<Vec<f32>> = idx.iter().map(|&i| s.k[i].clone()).collect();
        let v: Vec<Vec<f32>> = idx.iter().map(|&i| s.v[i].clone()).collect();
        Ok((self.expand(&k), self.expand(&v)))
    }

    pub fn range(&self, layer: usize, kind: EntryKind) -> Range<usize> {
        let s = &self.streams[layer][slot(kind)];
        s.start..s.end()
    }

    pub fn evict(&mut self, keep: usize) -> usize {
        let pl = self.config.page_len;
        let mut freed = 0;
        for (layer, st) in self.streams.iter_mut().enumerate() {
            let s = &mut st[0];
            let new_start = s.start.max(s.end().saturating_sub(keep));
            freed += new_start - s.start;
            s.start = new_start;
            while s.base + pl <= new_start && s.base < s.end() {
                s.base += pl;
            }
            self.entries
                .retain(|e| !(e.layer == layer && e.kind == EntryKind::SelfAttn && e.range.end <= new_start));
            for e in self.entries.iter_mut() {
                if e.layer == layer && e.kind == EntryKind::SelfAttn {
                    e.range.start = e.range.start.max(new_start);
                }
            }
        }
        freed
    }

    pub fn clear_cross(&mut self) -> usize {
        for st in &mut self.streams {
            st[1] = Stream::default();
        }
        let before = self.entries.len();
        self.entries.retain(|e| e.kind != EntryKind::CrossAttn);
        before - self.entries.len()
    }

    pub fn live_ids(&self) -> Vec<u64> {
        self.entries.iter().map(|e| e.id).collect()
    }

    pub fn next_id(&self) -> u64 {
        self.next_id
    }
}

fn same_bits(a: &Tensor, b: &Tensor) -> bool {
    a.shape() == b.shape() && a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits())
}

fn compare(
    what: &str,
    got: Result<(Tensor, Tensor), KvError>,
    want: Result<(Tensor, Tensor), KvError>,
) -> Result<(), String> {
    match (got, want) {
        (Ok((gk, gv)), Ok((wk, wv))) if same_bits(&gk, &wk) && same_bits(&gv, &wv) => Ok(()),
        (Err(a), Err(b)) if a == b => Ok(()),
        (g, w) => Err(format!("{what}: cache {g:?} vs reference {w:?}")),
    }
}

pub fn random_config(rng: &mut impl Rng) -> KvConfig {
    let head_dim = rng.random_range(1..=6);
    let latent = if rng.random_bool(0.25) {
        let l = rng.random_range(1..=head_dim);
        LatentMode::On {
            latent_dim: l,
            down_proj: rand_tensor(rng, l, head_dim),
            up_proj: rand_tensor(rng, head_dim, l),
        }
    } else {
        LatentMode::Off
    };
    KvConfig {
        num_layers: rng.random_range(1..=3),
        head_dim,
        page_len: rng.random_range(1..=8),
        latent,
        capacity_pages_device: if rng.random_bool(0.03) { 0 } else { rng.random_range(1..=12) },
        capacity_pages_host: rng.random_range(0..=12),
    }
}

/// What one random sequence exercised.
#[derive(Debug, Default, Clone, Copy)]
pub struct SequenceReport {
    pub ops: usize,
    pub fetches: usize,
    pub offloads: usize,
    pub evictions: usize,
    pub spills: usize,
}

fn pick_range(rng: &mut impl Rng, r: Range<usize>) -> Range<usize> {
    // mostly valid, sometimes straddling the addressable window
    let lo = r.start.saturating_sub(usize::from(rng.random_bool(0.1)));
    let hi = r.end + usize::from(rng.random_bool(0.1));
    let a = rng.random_range(lo..=hi);
    let b = rng.random_range(a..=hi);
    a..b
}

/// Run `len` random operations against both stores, checking every result.
pub fn run_random_sequence(rng: &mut impl Rng, len: usize) -> Result<SequenceReport, String> {
    let config = random_config(rng);
    let mut cache = KvCache::new(config.clone()).map_err(|e| e.to_string())?;
    let mut reference = RefStore::new(config.clone());
    let mut rep = SequenceReport::default();
    let layers = config.num_layers;
    for step in 0..len {
        rep.ops += 1;
        let layer = if rng.random_bool(0.03) { layers } else { rng.random_range(0..layers) };
        let kind = if rng.random_bool(0.25) { EntryKind::CrossAttn } else { EntryKind::SelfAttn };
        match rng.random_range(0..100) {
            0..=34 => {
                let t = if rng.random_bool(0.03) { 0 } else { rng.random_range(1..=20) };
                let w = if rng.random_bool(0.03) { config.head_dim + 1 } else { config.head_dim };
                let k = rand_tensor(rng, t, w);
                let v = rand_tensor(rng, t, w);
                let got = cache.append_block(layer, &k, &v, kind, step as u32).map(|e| e.block_id);
                let want = reference.append_kind(layer, &k, &v, kind);
                if got != want {
                    return Err(format!("append at step {step}: cache {got:?} vs reference {want:?}"));
                }
                if cache.memory_stats().host_pages_used > 0 {
                    rep.spills += 1;
                }
            }
            35..=54 => {
                rep.fetches += 1;
                let r = if layer < layers { pick_range(rng, reference.range(layer, kind)) } else { 0..1 };
                compare(
                    &format!("fetch_range at step {step}"),
                    cache.fetch_range_of(layer, kind, r.clone()),
                    reference.fetch_range(layer, kind, r),
                )?;
            }
            55..=64 => {
                rep.fetches += 1;
                let idx: Vec<usize> = if layer < layers {
                    let r = reference.range(layer, EntryKind::SelfAttn);
                    let n = rng.random_range(0..6);
                    (0..n).map(|_| rng.random_range(r.start.saturating_sub(1)..=r.end)).collect()
                } else {
                    vec![0]
                };
                compare(
                    &format!("fetch_indices at step {step}"),
                    cache.fetch_indices(layer, &idx),
                    reference.fetch_indices(layer, &idx),
                )?;
            }
            65..=74 => {
                rep.offloads += 1;
                let live = reference.live_ids();
                let mut ids: Vec<u64> = (0..rng.random_range(0..3))
                    .filter(|&_| !live.is_empty()).map(|_| live[rng.random_range(0..live.len())])
                    .collect();
                let unknown = rng.random_bool(0.1);
                if unknown {
                    ids.push(reference.next_id() + rng.random_range(0..3));
                }
                match cache.offload_blocks(&ids) {
                    Err(KvError::UnknownBlock(id)) if unknown && !live.contains(&id) => {}
                    Err(KvError::HostFull { .. }) if !unknown => {}
                    Ok(_) if !unknown => {
                        for e in cache.entries().iter().filter(|e| ids.contains(&e.block_id)) {
                            for p in &e.page_list {
                                let tier = cache.page(*p).map(|p| p.tier);
                                if tier != Some(Tier::Host) {
                                    return Err(format!("offload at step {step}: page {p:?} is {tier:?}"));
                                }
                            }
                        }
                    }
                    other => return Err(format!("offload at step {step}: unexpected {other:?}")),
                }
            }
            75..=84 => {
                rep.evictions += 1;
                let keep = rng.random_range(0..=24);
                let got = cache.evict_window(keep);
                let want = reference.evict(keep);
                if got != want {
                    return Err(format!("evict at step {step}: freed {got} vs {want}"));
                }
            }
            85..=89 => {
                let got = cache.clear_cross_attention();
                let want = reference.clear_cross();
                if got != want {
                    return Err(format!("clear at step {step}: {got} vs {want}"));
                }
            }
            _ => {
                if layer < layers {
                    compare(
                        &format!("fetch_all at step {step}"),
                        cache.fetch_all(layer, kind),
                        reference.fetch_range(layer, kind, reference.range(layer, kind)),
                    )?;
                }
            }
        }
        let s = cache.memory_stats();
        if s.device_pages_used + s.host_pages_used != reference.pages_used() {
            return Err(format!(
                "step {step}: pages {}+{} vs reference {}",
                s.device_pages_used,
                s.host_pages_used,
                reference.pages_used()
            ));
        }
        for l in 0..layers {
            let want_self = reference.range(l, EntryKind::SelfAttn).len();
            let want_cross = reference.range(l, EntryKind::CrossAttn).len();
            if s.self_tokens_per_layer[l] != want_self || s.cross_tokens_per_layer[l] != want_cross {
                return Err(format!("step {step}: token counts differ on layer {l}"));
            }
        }
        cache.audit().map_err(|e| format!("audit at step {step}: {e}"))?;
    }
    Ok(rep)
}
