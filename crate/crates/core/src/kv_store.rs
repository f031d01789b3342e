//! Per-group paged key/value storage.
//!
//! Every stored token keeps its key, value and absolute sequence position.
//! Page summaries (element-wise key max/min) are maintained over the
//! *active* subsequence: in eviction mode that is every stored token, in
//! filter mode it is the subset chosen by the last retention pass plus any
//! token appended since.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{running_minmax_update, Matrix};

/// Attention-group geometry: `num_groups` KV heads, each shared by
/// `heads_per_group` query heads.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroupLayout {
    pub num_groups: usize,
    pub heads_per_group: usize,
    pub head_dim: usize,
}

impl GroupLayout {
    pub fn new(num_groups: usize, heads_per_group: usize, head_dim: usize) -> Result<Self> {
        if num_groups == 0 || heads_per_group == 0 || head_dim == 0 {
            return Err(Error::InvalidShape(format!(
                "group layout G={num_groups} H={heads_per_group} d={head_dim} must be positive"
            )));
        }
        Ok(Self {
            num_groups,
            heads_per_group,
            head_dim,
        })
    }
}

/// How a stage-1 selection is applied to the store.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum RetentionMode {
    /// Drop unselected tokens permanently.
    Evict,
    /// Keep everything; restrict the active set to the selection.
    Filter,
}

/// Element-wise key max/min per page, laid out dimension-major: for head
/// dimension `j`, `k_max[j]` holds one value per page, so gathering `k1`
/// selected dimensions reads `k1` contiguous runs.
#[derive(Debug, Clone)]
struct PageSummaries {
    page_len: usize,
    k_max: Vec<Vec<f32>>,
    k_min: Vec<Vec<f32>>,
    // Token-major copy of the open (last) page.
    open_min: Vec<f32>,
    open_max: Vec<f32>,
    covered: usize,
}

impl PageSummaries {
    fn new(head_dim: usize, page_len: usize) -> Self {
        Self {
            page_len,
            k_max: vec![Vec::new(); head_dim],
            k_min: vec![Vec::new(); head_dim],
            open_min: vec![0.0; head_dim],
            open_max: vec![0.0; head_dim],
            covered: 0,
        }
    }

    fn num_pages(&self) -> usize {
        self.covered.div_ceil(self.page_len)
    }

    fn push(&mut self, key: &[f32]) {
        if self.covered.is_multiple_of(self.page_len) {
            self.open_min.copy_from_slice(key);
            self.open_max.copy_from_slice(key);
            for (j, &v) in key.iter().enumerate() {
                self.k_max[j].push(v);
                self.k_min[j].push(v);
            }
        } else {
            running_minmax_update(&mut self.open_min, &mut self.open_max, key)
                .expect("summary width equals head_dim");
            let last = self.num_pages() - 1;
            for j in 0..key.len() {
                self.k_max[j][last] = self.open_max[j];
                self.k_min[j][last] = self.open_min[j];
            }
        }
        self.covered += 1;
    }
}

#[derive(Debug, Clone)]
pub struct KvStore {
    head_dim: usize,
    keys: Vec<f32>,
    values: Vec<f32>,
    positions: Vec<usize>,
    next_position: usize,
    active: Vec<usize>,
    filtered: bool,
    summaries: PageSummaries,
}

impl KvStore {
    pub fn new(head_dim: usize, page_len: usize) -> Result<Self> {
        if head_dim == 0 {
            return Err(Error::InvalidShape("head_dim must be >= 1".into()));
        }
        if page_len == 0 {
            return Err(Error::InvalidInput("page_len must be >= 1".into()));
        }
        Ok(Self {
            head_dim,
            keys: Vec::new(),
            values: Vec::new(),
            positions: Vec::new(),
            next_position: 0,
            active: Vec::new(),
            filtered: false,
            summaries: PageSummaries::new(head_dim, page_len),
        })
    }

    pub fn head_dim(&self) -> usize {
        self.head_dim
    }

    pub fn page_len(&self) -> usize {
        self.summaries.page_len
    }

    /// Number of physically stored tokens.
    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    /// Store-local indices visible to stage 2, strictly increasing.
    pub fn active(&self) -> &[usize] {
        &self.active
    }

    pub fn active_len(&self) -> usize {
        self.active.len()
    }

    /// True when the active set may be a strict subset of stored tokens.
    pub fn is_filtered(&self) -> bool {
        self.filtered
    }

    pub fn key(&self, i: usize) -> &[f32] {
        &self.keys[i * self.head_dim..(i + 1) * self.head_dim]
    }

    pub fn value(&self, i: usize) -> &[f32] {
        &self.values[i * self.head_dim..(i + 1) * self.head_dim]
    }

    /// Absolute sequence position of stored token `i`.
    pub fn position(&self, i: usize) -> usize {
        self.positions[i]
    }

    pub fn num_pages(&self) -> usize {
        self.summaries.num_pages()
    }

    /// Per-page key maxima for head dimension `j`.
    pub fn page_max_column(&self, j: usize) -> &[f32] {
        &self.summaries.k_max[j]
    }

    /// Per-page key minima for head dimension `j`.
    pub fn page_min_column(&self, j: usize) -> &[f32] {
        &self.summaries.k_min[j]
    }

    /// Store-local token indices covered by page `p`.
    pub fn page_tokens(&self, p: usize) -> &[usize] {
        let l = self.page_len();
        &self.active[p * l..((p + 1) * l).min(self.active.len())]
    }

    pub fn append(&mut self, key: &[f32], value: &[f32]) -> Result<usize> {
        if key.len() != self.head_dim || value.len() != self.head_dim {
            return Err(Error::InvalidShape(format!(
                "append expects d={}, got key {} value {}",
                self.head_dim,
                key.len(),
                value.len()
            )));
        }
        let idx = self.positions.len();
        self.keys.extend_from_slice(key);
        self.values.extend_from_slice(value);
        self.positions.push(self.next_position);
        self.next_position += 1;
        self.active.push(idx);
        self.summaries.push(key);
        Ok(idx)
    }

    /// Applies a stage-1 selection. `keep` indexes stored tokens and must be
    /// strictly increasing.
    pub fn apply_retention(&mut self, keep: &[usize], mode: RetentionMode) -> Result<()> {
        for (n, &i) in keep.iter().enumerate() {
            if i >= self.len() {
                return Err(Error::InvalidIndex {
                    index: i,
                    bound: self.len(),
                });
            }
            if n > 0 && keep[n - 1] >= i {
                return Err(Error::InvalidInput(
                    "retention indices must be strictly increasing".into(),
                ));
            }
        }
        match mode {
            RetentionMode::Evict => {
                let d = self.head_dim;
                let mut keys = Vec::with_capacity(keep.len() * d);
                let mut values = Vec::with_capacity(keep.len() * d);
                let mut positions = Vec::with_capacity(keep.len());
                for &i in keep {
                    keys.extend_from_slice(self.key(i));
                    values.extend_from_slice(self.value(i));
                    positions.push(self.positions[i]);
                }
                self.keys = keys;
                self.values = values;
                self.positions = positions;
                self.active = (0..keep.len()).collect();
                self.filtered = false;
            }
            RetentionMode::Filter => {
                self.active = keep.to_vec();
                self.filtered = keep.len() != self.len();
            }
        }
        self.rebuild_summaries();
        Ok(())
    }

    /// Changes the page length and rebuilds summaries over the active set.
    pub fn set_page_len(&mut self, page_len: usize) -> Result<()> {
        if page_len == 0 {
            return Err(Error::InvalidInput("page_len must be >= 1".into()));
        }
        if page_len != self.page_len() {
            self.summaries.page_len = page_len;
            self.rebuild_summaries();
        }
        Ok(())
    }

    fn rebuild_summaries(&mut self) {
        let mut fresh = PageSummaries::new(self.head_dim, self.page_len());
        for &i in &self.active {
            fresh.push(&self.keys[i * self.head_dim..(i + 1) * self.head_dim]);
        }
        self.summaries = fresh;
    }

    fn is_active(&self, i: usize) -> bool {
        if self.filtered {
            self.active.binary_search(&i).is_ok()
        } else {
            i < self.len()
        }
    }

    /// Copies keys and values of `idx` (in the given order) into matrices.
    pub fn gather(&self, idx: &[usize]) -> Result<(Matrix, Matrix)> {
        let d = self.head_dim;
        let mut keys = Vec::with_capacity(idx.len() * d);
        let mut values = Vec::with_capacity(idx.len() * d);
        for &i in idx {
            if !self.is_active(i) {
                return Err(Error::InvalidIndex {
                    index: i,
                    bound: self.len(),
                });
            }
            keys.extend_from_slice(self.key(i));
            values.extend_from_slice(self.value(i));
        }
        Ok((
            Matrix::new(idx.len(), d, keys)?,
            Matrix::new(idx.len(), d, values)?,
        ))
    }

    /// Elements read by one estimation pass that touches `k1` dimensions:
    /// one of max/min per selected dimension per page.
    pub fn summary_traffic_elements(&self, k1: usize) -> usize {
        self.num_pages() * k1
    }

    /// Elements held by the max and min summaries together.
    pub fn summary_elements(&self) -> usize {
        2 * self.head_dim * self.num_pages()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_store(rng: &mut ChaCha8Rng, n: usize, d: usize, l: usize) -> KvStore {
        let mut s = KvStore::new(d, l).unwrap();
        for _ in 0..n {
            let k: Vec<f32> = (0..d).map(|_| rng.random_range(-5.0f32..5.0)).collect();
            let v: Vec<f32> = (0..d).map(|_| rng.random_range(-5.0f32..5.0)).collect();
            s.append(&k, &v).unwrap();
        }
        s
    }

    /// Batch recomputation over the active sequence, token-major.
    fn batch_summaries(s: &KvStore) -> Vec<(Vec<f32>, Vec<f32>)> {
        s.active()
            .chunks(s.page_len())
            .map(|page| {
                let d = s.head_dim();
                let mut lo = vec![f32::INFINITY; d];
                let mut hi = vec![f32::NEG_INFINITY; d];
                for &i in page {
                    for j in 0..d {
                        lo[j] = lo[j].min(s.key(i)[j]);
                        hi[j] = hi[j].max(s.key(i)[j]);
                    }
                }
                (lo, hi)
            })
            .collect()
    }

    fn assert_summaries_match(s: &KvStore) {
        let batch = batch_summaries(s);
        assert_eq!(s.num_pages(), batch.len());
        for (p, (lo, hi)) in batch.iter().enumerate() {
            for j in 0..s.head_dim() {
                assert_eq!(s.page_min_column(j)[p], lo[j]);
                assert_eq!(s.page_max_column(j)[p], hi[j]);
            }
        }
    }

    #[test]
    fn two_token_page() {
        let mut s = KvStore::new(2, 2).unwrap();
        s.append(&[1.0, -2.0], &[0.0, 0.0]).unwrap();
        s.append(&[3.0, 4.0], &[0.0, 0.0]).unwrap();
        assert_eq!(s.num_pages(), 1);
        assert_eq!(s.page_max_column(0)[0], 3.0);
        assert_eq!(s.page_max_column(1)[0], 4.0);
        assert_eq!(s.page_min_column(0)[0], 1.0);
        assert_eq!(s.page_min_column(1)[0], -2.0);
    }

    #[test]
    fn unit_pages_mirror_keys() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let s = random_store(&mut rng, 20, 4, 1);
        for i in 0..20 {
            for j in 0..4 {
                assert_eq!(s.page_max_column(j)[i], s.key(i)[j]);
                assert_eq!(s.page_min_column(j)[i], s.key(i)[j]);
            }
        }
    }

    #[test]
    fn incremental_equals_batch_random() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let s = random_store(&mut rng, 300, 5, 7);
        assert_eq!(s.num_pages(), 300usize.div_ceil(7));
        assert_summaries_match(&s);
    }

    #[test]
    fn append_rejects_bad_dims() {
        let mut s = KvStore::new(3, 2).unwrap();
        assert!(matches!(
            s.append(&[1.0, 2.0], &[1.0, 2.0, 3.0]),
            Err(Error::InvalidShape(_))
        ));
    }

    #[test]
    fn retention_keep_all_is_noop() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let base = random_store(&mut rng, 17, 3, 4);
        let all: Vec<usize> = (0..17).collect();
        for mode in [RetentionMode::Evict, RetentionMode::Filter] {
            let mut s = base.clone();
            s.apply_retention(&all, mode).unwrap();
            assert_eq!(s.len(), 17);
            assert_eq!(s.active(), &all[..]);
            assert!(!s.is_filtered());
            assert_summaries_match(&s);
            assert_eq!(s.gather(&all).unwrap(), base.gather(&all).unwrap());
        }
    }

    #[test]
    fn filter_mode_keeps_storage() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut s = random_store(&mut rng, 4, 2, 1);
        s.apply_retention(&[0, 2], RetentionMode::Filter).unwrap();
        assert_eq!(s.len(), 4);
        assert_eq!(s.active(), &[0, 2]);
        assert_eq!(s.num_pages(), 2);
        assert!(matches!(s.gather(&[1]), Err(Error::InvalidIndex { .. })));
        // New tokens join the active set.
        s.append(&[0.0, 0.0], &[0.0, 0.0]).unwrap();
        assert_eq!(s.active(), &[0, 2, 4]);
        assert_summaries_match(&s);
    }

    #[test]
    fn retention_rejects_bad_indices() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut s = random_store(&mut rng, 4, 2, 2);
        assert!(matches!(
            s.apply_retention(&[0, 4], RetentionMode::Evict),
            Err(Error::InvalidIndex { index: 4, .. })
        ));
        assert!(s.apply_retention(&[2, 1], RetentionMode::Filter).is_err());
    }

    #[test]
    fn gather_empty_and_naive_copy() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let s = random_store(&mut rng, 50, 6, 3);
        let (k, v) = s.gather(&[]).unwrap();
        assert_eq!((k.rows(), v.rows()), (0, 0));
        let idx: Vec<usize> = (0..30).map(|_| rng.random_range(0..50)).collect();
        let (k, v) = s.gather(&idx).unwrap();
        for (r, &i) in idx.iter().enumerate() {
            assert_eq!(k.row(r), s.key(i));
            assert_eq!(v.row(r), s.value(i));
        }
        assert!(s.gather(&[50]).is_err());
    }

    #[test]
    fn summary_traffic_counts() {
        let mut s = KvStore::new(16, 4).unwrap();
        for _ in 0..4 {
            s.append(&[0.5; 16], &[0.0; 16]).unwrap();
        }
        assert_eq!(s.summary_traffic_elements(16), 16);
        for _ in 0..36 {
            s.append(&[0.5; 16], &[0.0; 16]).unwrap();
        }
        assert_eq!(s.num_pages(), 10);
        assert_eq!(s.summary_traffic_elements(16), 160);
        assert_eq!(s.summary_elements(), 2 * 16 * 10);
    }

    #[test]
    fn set_page_len_rebuilds() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut s = random_store(&mut rng, 40, 3, 2);
        s.set_page_len(7).unwrap();
        assert_eq!(s.num_pages(), 6);
        assert_summaries_match(&s);
    }

    proptest! {
        #[test]
        fn eviction_matches_list_filtering(
            seed in 0u64..1000,
            n in 1usize..120,
            page_len in 1usize..9,
            mask in prop::collection::vec(any::<bool>(), 120),
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut s = random_store(&mut rng, n, 4, page_len);
            let keep: Vec<usize> = (0..n).filter(|&i| mask[i]).collect();
            let before = s.gather(&keep).unwrap();
            let positions: Vec<usize> = keep.iter().map(|&i| s.position(i)).collect();
            s.apply_retention(&keep, RetentionMode::Evict).unwrap();
            let all: Vec<usize> = (0..s.len()).collect();
            prop_assert_eq!(s.gather(&all).unwrap(), before);
            prop_assert_eq!(all.iter().map(|&i| s.position(i)).collect::<Vec<_>>(), positions);
            assert_summaries_match(&s);
        }

        #[test]
        fn page_bound_holds(
            seed in 0u64..1000,
            page_len in 1usize..6,
            signs in prop::collection::vec(prop::bool::ANY, 5),
            dims in prop::collection::vec(prop::bool::ANY, 5),
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let s = random_store(&mut rng, 23, 5, page_len);
            for p in 0..s.num_pages() {
                for &i in s.page_tokens(p) {
                    let (mut bound, mut exact) = (0.0f64, 0.0f64);
                    for j in (0..5).filter(|&j| dims[j]) {
                        let sj = if signs[j] { 1.0 } else { -1.0 };
                        let fetched = if sj >= 0.0 { s.page_max_column(j)[p] } else { s.page_min_column(j)[p] };
                        bound += sj * fetched as f64;
                        exact += sj * s.key(i)[j] as f64;
                    }
                    prop_assert!(bound >= exact);
                }
            }
        }
    }
}
