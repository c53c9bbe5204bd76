//! Block-wise paged KV store.
//!
//! Every layer owns two token streams, one for self-attention context and one
//! for cross-attention (prompt) context. A stream is an ordered list of
//! fixed-size pages; token `p` of a stream lives at slot `(p - base) %
//! page_len` of page `(p - base) / page_len`. Appends pack into the last
//! partially filled page before allocating new ones.
//!
//! Pages live on one of two simulated tiers. Allocation is device-first; when
//! the device tier is full the least recently used device page is demoted to
//! the host tier. Reads restore host pages on demand, swapping out the LRU
//! device page if needed. Only when both tiers are full does an append fail.
//!
//! In latent mode each stored row is `down_proj · row` and reads return
//! `up_proj · stored`.

use alloc::collections::VecDeque;
use alloc::vec;
use alloc::vec::Vec;
use core::ops::Range;

use crate::tensor::{Tensor, TensorError};

pub const DEFAULT_PAGE_LEN: usize = 16;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum KvError {
    #[error("invalid kv config: {0}")]
    Config(&'static str),
    #[error("layer {layer} out of range ({num_layers} layers)")]
    Layer { layer: usize, num_layers: usize },
    #[error("expected rows of width {expected}, got {got}")]
    Width { expected: usize, got: usize },
    #[error("key and value tensors differ in shape")]
    KvShape,
    #[error("cannot append an empty block")]
    EmptyAppend,
    #[error("device tier has zero capacity")]
    NoDeviceCapacity,
    #[error("out of memory: need {needed} more pages, {available} free across tiers")]
    OutOfMemory { needed: usize, available: usize },
    #[error("host tier full: need {needed} pages, {available} free")]
    HostFull { needed: usize, available: usize },
    #[error("token range {start}..{end} outside addressable {lo}..{hi}")]
    OutOfBounds {
        start: usize,
        end: usize,
        lo: usize,
        hi: usize,
    },
    #[error("unknown block id {0}")]
    UnknownBlock(u64),
    #[error("internal invariant violated: {0}")]
    Invariant(&'static str),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct PageId(pub u32);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Tier {
    Device,
    Host,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum EntryKind {
    SelfAttn,
    CrossAttn,
}

#[derive(Debug, Clone, PartialEq)]
pub enum LatentMode {
    Off,
    /// `down_proj` is `[latent_dim, head_dim]`, `up_proj` is `[head_dim, latent_dim]`.
    On {
        latent_dim: usize,
        down_proj: Tensor,
        up_proj: Tensor,
    },
}

/// `head_dim` is the width of one stored token row; multi-head callers store
/// `heads * head_dim` wide rows per layer.
#[derive(Debug, Clone, PartialEq)]
pub struct KvConfig {
    pub num_layers: usize,
    pub head_dim: usize,
    pub page_len: usize,
    pub latent: LatentMode,
    pub capacity_pages_device: usize,
    pub capacity_pages_host: usize,
}

impl Default for KvConfig {
    fn default() -> Self {
        Self {
            num_layers: 1,
            head_dim: 16,
            page_len: DEFAULT_PAGE_LEN,
            latent: LatentMode::Off,
            capacity_pages_device: 1024,
            capacity_pages_host: 1024,
        }
    }
}

impl KvConfig {
    pub fn validate(&self) -> Result<(), KvError> {
        if self.num_layers == 0 {
            return Err(KvError::Config("num_layers must be >= 1"));
        }
        if self.head_dim == 0 {
            return Err(KvError::Config("head_dim must be >= 1"));
        }
        if self.page_len == 0 {
            return Err(KvError::Config("page_len must be >= 1"));
        }
        if let LatentMode::On {
            latent_dim,
            down_proj,
            up_proj,
        } = &self.latent
        {
            if *latent_dim == 0 || *latent_dim > self.head_dim {
                return Err(KvError::Config("latent_dim must be in 1..=head_dim"));
            }
            if down_proj.shape() != [*latent_dim, self.head_dim] {
                return Err(KvError::Config("down_proj must be [latent_dim, head_dim]"));
            }
            if up_proj.shape() != [self.head_dim, *latent_dim] {
                return Err(KvError::Config("up_proj must be [head_dim, latent_dim]"));
            }
        }
        Ok(())
    }

    /// Width of rows as physically stored on a page.
    pub fn stored_width(&self) -> usize {
        match &self.latent {
            LatentMode::Off => self.head_dim,
            LatentMode::On { latent_dim, .. } => *latent_dim,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KvPage {
    pub id: PageId,
    pub tier: Tier,
    pub k_data: Vec<f32>,
    pub v_data: Vec<f32>,
    pub filled: usize,
    last_use: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BlockEntry {
    pub block_id: u64,
    pub layer: usize,
    pub token_range: Range<usize>,
    pub page_list: Vec<PageId>,
    pub kind: EntryKind,
    pub chunk_index: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct KvStats {
    pub device_pages_used: usize,
    pub host_pages_used: usize,
    /// Addressable tokens over all layers and both kinds.
    pub total_tokens: usize,
    pub blocks_per_layer: Vec<usize>,
    /// Addressable K+V bytes at f32, in stored (possibly latent) width.
    pub bytes_logical: usize,
    pub self_tokens_per_layer: Vec<usize>,
    pub cross_tokens_per_layer: Vec<usize>,
}

#[derive(Debug, Clone, Default)]
struct TokenStream {
    pages: VecDeque<PageId>,
    /// Stream position of slot 0 of `pages[0]`.
    base: usize,
    /// First addressable token.
    start: usize,
    /// One past the last appended token.
    end: usize,
}

impl TokenStream {
    fn locate(&self, pos: usize, page_len: usize) -> (PageId, usize) {
        let rel = pos - self.base;
        (self.pages[rel / page_len], rel % page_len)
    }
}

/// Snapshot of one page for debug dumps.
#[derive(Debug, Clone, PartialEq)]
pub struct PageSnapshot {
    pub id: PageId,
    pub tier: Tier,
    pub filled: usize,
    pub k_data: Vec<f32>,
    pub v_data: Vec<f32>,
}

#[derive(Debug, Clone)]
pub struct KvCache {
    config: KvConfig,
    width: usize,
    slots: Vec<Option<KvPage>>,
    free_ids: Vec<PageId>,
    device_used: usize,
    host_used: usize,
    streams: Vec<[TokenStream; 2]>,
    entries: Vec<BlockEntry>,
    next_block_id: u64,
    clock: u64,
}

fn kind_slot(kind: EntryKind) -> usize {
    match kind {
        EntryKind::SelfAttn => 0,
        EntryKind::CrossAttn => 1,
    }
}

impl KvCache {
    pub fn new(config: KvConfig) -> Result<Self, KvError> {
        config.validate()?;
        let width = config.stored_width();
        let streams = (0..config.num_layers).map(|_| Default::default()).collect();
        Ok(Self {
            config,
            width,
            slots: Vec::new(),
            free_ids: Vec::new(),
            device_used: 0,
            host_used: 0,
            streams,
            entries: Vec::new(),
            next_block_id: 0,
            clock: 0,
        })
    }

    pub fn config(&self) -> &KvConfig {
        &self.config
    }

    pub fn entries(&self) -> &[BlockEntry] {
        &self.entries
    }

    pub fn page(&self, id: PageId) -> Option<&KvPage> {
        self.slots.get(id.0 as usize).and_then(|p| p.as_ref())
    }

    /// Addressable self-attention token range of a layer.
    pub fn self_range(&self, layer: usize) -> Result<Range<usize>, KvError> {
        let s = &self.stream(layer, EntryKind::SelfAttn)?;
        Ok(s.start..s.end)
    }

    fn stream(&self, layer: usize, kind: EntryKind) -> Result<&TokenStream, KvError> {
        self.streams
            .get(layer)
            .map(|s| &s[kind_slot(kind)])
            .ok_or(KvError::Layer {
                layer,
                num_layers: self.config.num_layers,
            })
    }

    fn tick(&mut self) -> u64 {
        self.clock += 1;
        self.clock
    }

    fn page_mut(&mut self, id: PageId) -> &mut KvPage {
        self.slots[id.0 as usize].as_mut().expect("live page")
    }

    fn pages_used(&self) -> usize {
        self.device_used + self.host_used
    }

    fn lru_device_page(&self, pinned: Option<PageId>) -> Option<PageId> {
        self.slots
            .iter()
            .flatten()
            .filter(|p| p.tier == Tier::Device && Some(p.id) != pinned)
            .min_by_key(|p| (p.last_use, p.id))
            .map(|p| p.id)
    }

    fn set_tier(&mut self, id: PageId, tier: Tier) {
        let page = self.page_mut(id);
        if page.tier == tier {
            return;
        }
        page.tier = tier;
        match tier {
            Tier::Device => {
                self.host_used -= 1;
                self.device_used += 1;
            }
            Tier::Host => {
                self.device_used -= 1;
                self.host_used += 1;
            }
        }
    }

    /// Make sure `id` is on the device tier, swapping out the LRU device page if needed.
    fn make_resident(&mut self, id: PageId) -> Result<(), KvError> {
        let now = self.tick();
        if self.page_mut(id).tier == Tier::Host {
            if self.device_used >= self.config.capacity_pages_device {
                let victim = self
                    .lru_device_page(Some(id))
                    .ok_or(KvError::NoDeviceCapacity)?;
                self.set_tier(victim, Tier::Host);
            }
            self.set_tier(id, Tier::Device);
        }
        self.page_mut(id).last_use = now;
        Ok(())
    }

    fn allocate_page(&mut self) -> Result<PageId, KvError> {
        if self.config.capacity_pages_device == 0 {
            return Err(KvError::NoDeviceCapacity);
        }
        if self.device_used >= self.config.capacity_pages_device {
            if self.host_used >= self.config.capacity_pages_host {
                return Err(KvError::OutOfMemory {
                    needed: 1,
                    available: 0,
                });
            }
            let victim = self.lru_device_page(None).ok_or(KvError::NoDeviceCapacity)?;
            self.set_tier(victim, Tier::Host);
        }
        let id = match self.free_ids.pop() {
            Some(id) => id,
            None => {
                self.slots.push(None);
                PageId((self.slots.len() - 1) as u32)
            }
        };
        let n = self.config.page_len * self.width;
        let last_use = self.tick();
        self.slots[id.0 as usize] = Some(KvPage {
            id,
            tier: Tier::Device,
            k_data: vec![0.0; n],
            v_data: vec![0.0; n],
            filled: 0,
            last_use,
        });
        self.device_used += 1;
        Ok(id)
    }

    fn free_page(&mut self, id: PageId) {
        if let Some(page) = self.slots[id.0 as usize].take() {
            match page.tier {
                Tier::Device => self.device_used -= 1,
                Tier::Host => self.host_used -= 1,
            }
            self.free_ids.push(id);
        }
    }

    fn to_stored(&self, rows: &Tensor) -> Result<Tensor, KvError> {
        match &self.config.latent {
            LatentMode::Off => Ok(rows.clone()),
            LatentMode::On { down_proj, .. } => {
                Ok(rows.matmul(&down_proj.transpose()?)?)
            }
        }
    }

    fn from_stored(&self, rows: Tensor) -> Result<Tensor, KvError> {
        match &self.config.latent {
            LatentMode::Off => Ok(rows),
            LatentMode::On { up_proj, .. } => Ok(rows.matmul(&up_proj.transpose()?)?),
        }
    }

    /// Append `t` token rows of K and V to a layer's stream of the given kind.
    pub fn append_block(
        &mut self,
        layer: usize,
        k: &Tensor,
        v: &Tensor,
        kind: EntryKind,
        chunk_index: u32,
    ) -> Result<BlockEntry, KvError> {
        self.stream(layer, kind)?;
        if k.shape() != v.shape() {
            return Err(KvError::KvShape);
        }
        if k.shape().len() != 2 || k.cols() != self.config.head_dim {
            return Err(KvError::Width {
                expected: self.config.head_dim,
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
        let page_len = self.config.page_len;
        let (room, tail) = {
            let s = &self.streams[layer][kind_slot(kind)];
            let used_in_last = (s.end - s.base) % page_len;
            if s.pages.is_empty() || used_in_last == 0 {
                (0, None)
            } else {
                (page_len - used_in_last, s.pages.back().copied())
            }
        };
        let needed = t.saturating_sub(room).div_ceil(page_len);
        let capacity = self.config.capacity_pages_device + self.config.capacity_pages_host;
        let available = capacity - self.pages_used();
        if needed > available {
            return Err(KvError::OutOfMemory { needed, available });
        }

        let ks = self.to_stored(k)?;
        let vs = self.to_stored(v)?;
        let w = self.width;
        let mut page_list = Vec::new();
        let start = self.streams[layer][kind_slot(kind)].end;
        let mut current = tail;
        if let Some(id) = current {
            self.make_resident(id)?;
            page_list.push(id);
        }
        for row in 0..t {
            let pos = start + row;
            let slot = (pos - self.streams[layer][kind_slot(kind)].base) % page_len;
            if slot == 0 {
                let id = self.allocate_page()?;
                self.streams[layer][kind_slot(kind)].pages.push_back(id);
                page_list.push(id);
                current = Some(id);
            }
            let id = current.ok_or(KvError::Invariant("no page to write"))?;
            let page = self.page_mut(id);
            page.k_data[slot * w..(slot + 1) * w].copy_from_slice(ks.row(row));
            page.v_data[slot * w..(slot + 1) * w].copy_from_slice(vs.row(row));
            page.filled = slot + 1;
        }
        let now = self.tick();
        for &id in &page_list {
            self.page_mut(id).last_use = now;
        }
        self.streams[layer][kind_slot(kind)].end = start + t;
        let entry = BlockEntry {
            block_id: self.next_block_id,
            layer,
            token_range: start..start + t,
            page_list,
            kind,
            chunk_index,
        };
        self.next_block_id += 1;
        self.entries.push(entry.clone());
        Ok(entry)
    }

    fn gather(
        &mut self,
        layer: usize,
        kind: EntryKind,
        positions: impl Iterator<Item = usize>,
        count: usize,
    ) -> Result<(Tensor, Tensor), KvError> {
        let w = self.width;
        let page_len = self.config.page_len;
        let mut kd = Vec::with_capacity(count * w);
        let mut vd = Vec::with_capacity(count * w);
        for pos in positions {
            let (id, slot) = self.streams[layer][kind_slot(kind)].locate(pos, page_len);
            self.make_resident(id)?;
            let page = self.page(id).ok_or(KvError::Invariant("dangling page"))?;
            kd.extend_from_slice(&page.k_data[slot * w..(slot + 1) * w]);
            vd.extend_from_slice(&page.v_data[slot * w..(slot + 1) * w]);
        }
        let k = self.from_stored(Tensor::matrix(count, w, kd)?)?;
        let v = self.from_stored(Tensor::matrix(count, w, vd)?)?;
        Ok((k, v))
    }

    /// Rows `range` of a layer's self-attention stream.
    pub fn fetch_range(&mut self, layer: usize, range: Range<usize>) -> Result<(Tensor, Tensor), KvError> {
        self.fetch_range_of(layer, EntryKind::SelfAttn, range)
    }

    pub fn fetch_range_of(
        &mut self,
        layer: usize,
        kind: EntryKind,
        range: Range<usize>,
    ) -> Result<(Tensor, Tensor), KvError> {
        let s = self.stream(layer, kind)?;
        let in_bounds = range.start >= s.start && range.end <= s.end;
        if range.start > range.end || (!range.is_empty() && !in_bounds) {
            return Err(KvError::OutOfBounds {
                start: range.start,
                end: range.end,
                lo: s.start,
                hi: s.end,
            });
        }
        if range.is_empty() {
            let d = self.config.head_dim;
            return Ok((Tensor::empty_rows(d), Tensor::empty_rows(d)));
        }
        let count = range.len();
        self.gather(layer, kind, range, count)
    }

    /// Rows at arbitrary self-attention positions, in the given order.
    pub fn fetch_indices(&mut self, layer: usize, indices: &[usize]) -> Result<(Tensor, Tensor), KvError> {
        let s = self.stream(layer, EntryKind::SelfAttn)?;
        if let Some(&bad) = indices.iter().find(|&&i| i < s.start || i >= s.end) {
            return Err(KvError::OutOfBounds {
                start: bad,
                end: bad + 1,
                lo: s.start,
                hi: s.end,
            });
        }
        if indices.is_empty() {
            let d = self.config.head_dim;
            return Ok((Tensor::empty_rows(d), Tensor::empty_rows(d)));
        }
        self.gather(layer, EntryKind::SelfAttn, indices.iter().copied(), indices.len())
    }

    /// All addressable rows of a stream.
    pub fn fetch_all(&mut self, layer: usize, kind: EntryKind) -> Result<(Tensor, Tensor), KvError> {
        let s = self.stream(layer, kind)?;
        let range = s.start..s.end;
        self.fetch_range_of(layer, kind, range)
    }

    /// Move every page of the given blocks to the host tier. Returns pages moved.
    pub fn offload_blocks(&mut self, block_ids: &[u64]) -> Result<usize, KvError> {
        let mut pages: Vec<PageId> = Vec::new();
        for &id in block_ids {
            let entry = self
                .entries
                .iter()
                .find(|e| e.block_id == id)
                .ok_or(KvError::UnknownBlock(id))?;
            for &p in &entry.page_list {
                let on_device = self.page(p).is_some_and(|pg| pg.tier == Tier::Device);
                if on_device && !pages.contains(&p) {
                    pages.push(p);
                }
            }
        }
        let available = self.config.capacity_pages_host - self.host_used;
        if pages.len() > available {
            return Err(KvError::HostFull {
                needed: pages.len(),
                available,
            });
        }
        for &p in &pages {
            self.set_tier(p, Tier::Host);
        }
        Ok(pages.len())
    }

    /// Keep only the trailing `keep_last_n_tokens` self-attention tokens of each
    /// layer addressable. Pages whose every slot falls before the window are freed.
    pub fn evict_window(&mut self, keep_last_n_tokens: usize) -> usize {
        let page_len = self.config.page_len;
        let mut freed_tokens = 0;
        let mut to_free = Vec::new();
        for layer in 0..self.config.num_layers {
            let s = &mut self.streams[layer][0];
            let new_start = s.start.max(s.end.saturating_sub(keep_last_n_tokens));
            freed_tokens += new_start - s.start;
            s.start = new_start;
            while !s.pages.is_empty() && s.base + page_len <= new_start {
                to_free.push(s.pages.pop_front().expect("nonempty"));
                s.base += page_len;
            }
            self.entries.retain_mut(|e| {
                if e.layer != layer || e.kind != EntryKind::SelfAttn {
                    return true;
                }
                if e.token_range.end <= new_start {
                    return false;
                }
                e.token_range.start = e.token_range.start.max(new_start);
                e.page_list.retain(|p| !to_free.contains(p));
                true
            });
        }
        for id in to_free {
            self.free_page(id);
        }
        freed_tokens
    }

    /// Drop every cross-attention entry and its pages. Returns entries removed.
    pub fn clear_cross_attention(&mut self) -> usize {
        let mut to_free = Vec::new();
        for layer in self.streams.iter_mut() {
            let s = &mut layer[1];
            to_free.extend(s.pages.drain(..));
            *s = TokenStream::default();
        }
        for id in to_free {
            self.free_page(id);
        }
        let before = self.entries.len();
        self.entries.retain(|e| e.kind != EntryKind::CrossAttn);
        before - self.entries.len()
    }

    pub fn memory_stats(&self) -> KvStats {
        let n = self.config.num_layers;
        let mut stats = KvStats {
            device_pages_used: self.device_used,
            host_pages_used: self.host_used,
            blocks_per_layer: vec![0; n],
            self_tokens_per_layer: vec![0; n],
            cross_tokens_per_layer: vec![0; n],
            ..Default::default()
        };
        for e in &self.entries {
            stats.blocks_per_layer[e.layer] += 1;
        }
        for (layer, s) in self.streams.iter().enumerate() {
            stats.self_tokens_per_layer[layer] = s[0].end - s[0].start;
            stats.cross_tokens_per_layer[layer] = s[1].end - s[1].start;
        }
        stats.total_tokens = stats.self_tokens_per_layer.iter().sum::<usize>()
            + stats.cross_tokens_per_layer.iter().sum::<usize>();
        stats.bytes_logical = stats.total_tokens * 2 * self.width * core::mem::size_of::<f32>();
        stats
    }

    /// Live pages in id order.
    pub fn snapshot_pages(&self) -> Vec<PageSnapshot> {
        self.slots
            .iter()
            .flatten()
            .map(|p| PageSnapshot {
                id: p.id,
                tier: p.tier,
                filled: p.filled,
                k_data: p.k_data.clone(),
                v_data: p.v_data.clone(),
            })
            .collect()
    }

    /// Check allocator bookkeeping: every live page belongs to exactly one
    /// stream, tier counters match, capacities hold.
    pub fn audit(&self) -> Result<(), KvError> {
        let mut owner = vec![0u8; self.slots.len()];
        for layer in &self.streams {
            for s in layer {
                for p in &s.pages {
                    let slot = owner
                        .get_mut(p.0 as usize)
                        .ok_or(KvError::Invariant("stream references unknown page"))?;
                    *slot += 1;
                }
            }
        }
        let (mut dev, mut host) = (0, 0);
        for (i, p) in self.slots.iter().enumerate() {
            match p {
                Some(p) => {
                    if owner[i] != 1 {
                        return Err(KvError::Invariant("page owned by zero or several streams"));
                    }
                    match p.tier {
                        Tier::Device => dev += 1,
                        Tier::Host => host += 1,
                    }
                }
                None => {
                    if owner[i] != 0 {
                        return Err(KvError::Invariant("stream references freed page"));
                    }
                    if !self.free_ids.contains(&PageId(i as u32)) {
                        return Err(KvError::Invariant("empty slot missing from free list"));
                    }
                }
            }
        }
        if dev != self.device_used || host != self.host_used {
            return Err(KvError::Invariant("tier counters out of sync"));
        }
        if dev > self.config.capacity_pages_device || host > self.config.capacity_pages_host {
            return Err(KvError::Invariant("tier over capacity"));
        }
        for e in &self.entries {
            if e.token_range.start >= e.token_range.end {
                return Err(KvError::Invariant("empty entry range"));
            }
        }
        Ok(())
    }
}
