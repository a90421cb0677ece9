//! Interaction logs, k-core filtering, chronological sequences,
//! leave-one-out splits and padded training batches.
//!
//! Item and user ids are contiguous from 1 after reindexing; id 0 is the
//! padding token.

use alloc::collections::BTreeMap;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::rng::RngStream;

/// One interaction with raw (file) ids.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RawInteraction {
    pub user: u64,
    pub item: u64,
    pub timestamp: i64,
}

/// One interaction with contiguous ids.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Interaction {
    pub user: u32,
    pub item: u32,
    pub timestamp: i64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InteractionLog {
    records: Vec<Interaction>,
    /// Raw id of user `i + 1`, ascending.
    user_ids: Vec<u64>,
    /// Raw id of item `i + 1`, ascending.
    item_ids: Vec<u64>,
}

impl InteractionLog {
    /// Reindexes raw ids to `1..=n` in ascending raw-id order. Record order
    /// is preserved.
    pub fn from_raw(raw: &[RawInteraction]) -> Result<Self> {
        if raw.is_empty() {
            return Err(Error::EmptyLog);
        }
        let mut user_ids: Vec<u64> = raw.iter().map(|r| r.user).collect();
        let mut item_ids: Vec<u64> = raw.iter().map(|r| r.item).collect();
        user_ids.sort_unstable();
        user_ids.dedup();
        item_ids.sort_unstable();
        item_ids.dedup();
        let index = |ids: &[u64], raw: u64| ids.binary_search(&raw).expect("id present") as u32 + 1;
        let records = raw
            .iter()
            .map(|r| Interaction {
                user: index(&user_ids, r.user),
                item: index(&item_ids, r.item),
                timestamp: r.timestamp,
            })
            .collect();
        Ok(Self { records, user_ids, item_ids })
    }

    pub fn records(&self) -> &[Interaction] {
        &self.records
    }

    pub fn n_users(&self) -> usize {
        self.user_ids.len()
    }

    pub fn n_items(&self) -> usize {
        self.item_ids.len()
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn raw_user(&self, user: u32) -> u64 {
        self.user_ids[user as usize - 1]
    }

    pub fn raw_item(&self, item: u32) -> u64 {
        self.item_ids[item as usize - 1]
    }

    pub fn item_raw_ids(&self) -> &[u64] {
        &self.item_ids
    }

    pub fn user_index(&self, raw: u64) -> Option<u32> {
        self.user_ids.binary_search(&raw).ok().map(|i| i as u32 + 1)
    }

    pub fn item_index(&self, raw: u64) -> Option<u32> {
        self.item_ids.binary_search(&raw).ok().map(|i| i as u32 + 1)
    }

    pub fn to_raw(&self) -> Vec<RawInteraction> {
        self.records
            .iter()
            .map(|r| RawInteraction {
                user: self.raw_user(r.user),
                item: self.raw_item(r.item),
                timestamp: r.timestamp,
            })
            .collect()
    }
}

/// Iteratively drops users and items with fewer than `k` interactions until
/// every survivor has at least `k`, then reindexes.
pub fn kcore_filter(log: &InteractionLog, k: usize) -> Result<InteractionLog> {
    if k == 0 {
        return Err(Error::InvalidParameter("k-core threshold must be at least 1".into()));
    }
    let mut alive = vec![true; log.len()];
    loop {
        let mut user_count = vec![0usize; log.n_users() + 1];
        let mut item_count = vec![0usize; log.n_items() + 1];
        for (r, _) in log.records.iter().zip(&alive).filter(|(_, a)| **a) {
            user_count[r.user as usize] += 1;
            item_count[r.item as usize] += 1;
        }
        let mut removed = false;
        for (r, a) in log.records.iter().zip(alive.iter_mut()) {
            if *a && (user_count[r.user as usize] < k || item_count[r.item as usize] < k) {
                *a = false;
                removed = true;
            }
        }
        if !removed {
            break;
        }
    }
    let raw: Vec<RawInteraction> = log
        .records
        .iter()
        .zip(&alive)
        .filter(|(_, a)| **a)
        .map(|(r, _)| RawInteraction { user: log.raw_user(r.user), item: log.raw_item(r.item), timestamp: r.timestamp })
        .collect();
    InteractionLog::from_raw(&raw)
}

/// A user's items in chronological order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UserSequence {
    pub user: u32,
    pub items: Vec<u32>,
}

/// Minimum length that leaves a non-empty train prefix, a validation target
/// and a test target.
pub const MIN_SEQUENCE_LEN: usize = 3;

/// Groups the log by user, orders each user's items by timestamp (stable on
/// ties) and drops users with fewer than [`MIN_SEQUENCE_LEN`] items.
pub fn build_sequences(log: &InteractionLog) -> Result<Vec<UserSequence>> {
    if log.is_empty() {
        return Err(Error::EmptyLog);
    }
    let mut per_user: Vec<Vec<(i64, u32)>> = vec![Vec::new(); log.n_users() + 1];
    for r in &log.records {
        per_user[r.user as usize].push((r.timestamp, r.item));
    }
    Ok(per_user
        .into_iter()
        .enumerate()
        .skip(1)
        .filter_map(|(user, mut events)| {
            events.sort_by_key(|(ts, _)| *ts);
            (events.len() >= MIN_SEQUENCE_LEN)
                .then(|| UserSequence { user: user as u32, items: events.into_iter().map(|(_, i)| i).collect() })
        })
        .collect())
}

/// Leave-one-out partition of one user's sequence.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UserSplit {
    pub user: u32,
    pub train: Vec<u32>,
    pub valid: u32,
    pub test: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Valid,
    Test,
}

impl Phase {
    pub fn name(self) -> &'static str {
        match self {
            Phase::Valid => "valid",
            Phase::Test => "test",
        }
    }
}

impl UserSplit {
    /// Model input and target for an evaluation phase.
    pub fn eval_case(&self, phase: Phase) -> (Vec<u32>, u32) {
        match phase {
            Phase::Valid => (self.train.clone(), self.valid),
            Phase::Test => {
                let mut input = self.train.clone();
                input.push(self.valid);
                (input, self.test)
            }
        }
    }

    /// Every item the user interacted with.
    pub fn all_items(&self) -> ItemSet {
        let mut items = self.train.clone();
        items.push(self.valid);
        items.push(self.test);
        ItemSet::from_items(items)
    }

    pub fn reassemble(&self) -> Vec<u32> {
        let mut s = self.train.clone();
        s.push(self.valid);
        s.push(self.test);
        s
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitSet {
    pub n_items: usize,
    pub users: Vec<UserSplit>,
}

/// Last item → test, penultimate → validation, the rest → training prefix.
pub fn leave_one_out_split(sequences: &[UserSequence], n_items: usize) -> Result<SplitSet> {
    let users = sequences
        .iter()
        .map(|s| {
            let n = s.items.len();
            if n < MIN_SEQUENCE_LEN {
                return Err(Error::Precondition(alloc::format!(
                    "user {} has {n} interactions; leave-one-out needs at least {MIN_SEQUENCE_LEN}",
                    s.user
                )));
            }
            Ok(UserSplit {
                user: s.user,
                train: s.items[..n - 2].to_vec(),
                valid: s.items[n - 2],
                test: s.items[n - 1],
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SplitSet { n_items, users })
}

/// Keeps the `len` most recent items, left-padding with 0 when shorter.
pub fn pad_truncate(items: &[u32], len: usize) -> Vec<u32> {
    let mut row = vec![0; len];
    let take = items.len().min(len);
    row[len - take..].copy_from_slice(&items[items.len() - take..]);
    row
}

/// Sorted, deduplicated item ids.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ItemSet(Vec<u32>);

impl ItemSet {
    pub fn from_items(mut items: Vec<u32>) -> Self {
        items.sort_unstable();
        items.dedup();
        Self(items)
    }

    pub fn contains(&self, item: u32) -> bool {
        self.0.binary_search(&item).is_ok()
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = u32> + '_ {
        self.0.iter().copied()
    }
}

/// Uniform draw from `1..=n_items` excluding `owned`.
pub fn sample_negative(rng: &mut RngStream, owned: &ItemSet, n_items: usize) -> Result<u32> {
    let owned_in_range = owned.iter().filter(|&i| i >= 1 && (i as usize) <= n_items).count();
    let free = n_items.saturating_sub(owned_in_range);
    if free == 0 {
        return Err(Error::Saturated);
    }
    if 2 * owned_in_range < n_items {
        loop {
            let cand = rng.below(n_items) as u32 + 1;
            if !owned.contains(cand) {
                return Ok(cand);
            }
        }
    }
    let mut k = rng.below(free);
    for cand in 1..=n_items as u32 {
        if !owned.contains(cand) {
            if k == 0 {
                return Ok(cand);
            }
            k -= 1;
        }
    }
    unreachable!("free count is consistent with the owned set")
}

/// Padded next-item training rows for a set of users.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Batch {
    pub users: Vec<usize>,
    pub inputs: Vec<Vec<u32>>,
    pub targets: Vec<Vec<u32>>,
    pub negatives: Vec<Vec<u32>>,
    pub valid: Vec<Vec<bool>>,
}

impl Batch {
    pub fn valid_count(&self) -> usize {
        self.valid.iter().flatten().filter(|v| **v).count()
    }
}

/// Input/target rows for one training prefix: position `t` predicts the
/// item at `t + 1`.
pub fn training_row(train: &[u32], len: usize) -> (Vec<u32>, Vec<u32>, Vec<bool>) {
    if train.len() < 2 {
        return (vec![0; len], vec![0; len], vec![false; len]);
    }
    let input = pad_truncate(&train[..train.len() - 1], len);
    let target = pad_truncate(&train[1..], len);
    let valid = target.iter().map(|t| *t != 0).collect();
    (input, target, valid)
}

/// Builds a batch for `users` (indices into `split.users`), drawing one
/// negative per valid position that avoids the user's whole item set.
pub fn build_batch(split: &SplitSet, users: &[usize], len: usize, rng: &mut RngStream) -> Result<Batch> {
    let mut batch = Batch {
        users: users.to_vec(),
        inputs: Vec::with_capacity(users.len()),
        targets: Vec::with_capacity(users.len()),
        negatives: Vec::with_capacity(users.len()),
        valid: Vec::with_capacity(users.len()),
    };
    for &u in users {
        let us = &split.users[u];
        let (input, target, valid) = training_row(&us.train, len);
        let owned = us.all_items();
        let mut neg = vec![0; len];
        for (n, v) in neg.iter_mut().zip(&valid) {
            if *v {
                *n = sample_negative(rng, &owned, split.n_items)?;
            }
        }
        batch.inputs.push(input);
        batch.targets.push(target);
        batch.negatives.push(neg);
        batch.valid.push(valid);
    }
    Ok(batch)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DatasetStats {
    pub users: usize,
    pub items: usize,
    pub actions: usize,
    pub avg_actions_user: f64,
    pub avg_actions_item: f64,
}

impl DatasetStats {
    pub fn from_counts(users: usize, items: usize, actions: usize) -> Result<Self> {
        if users == 0 || items == 0 {
            return Err(Error::EmptyLog);
        }
        Ok(Self {
            users,
            items,
            actions,
            avg_actions_user: actions as f64 / users as f64,
            avg_actions_item: actions as f64 / items as f64,
        })
    }
}

pub fn dataset_stats(log: &InteractionLog) -> Result<DatasetStats> {
    DatasetStats::from_counts(log.n_users(), log.n_items(), log.len())
}

/// Statistics over built sequences; items counts distinct ids that occur.
pub fn sequence_stats(sequences: &[UserSequence]) -> Result<DatasetStats> {
    let mut seen = BTreeMap::new();
    let mut actions = 0;
    for s in sequences {
        actions += s.items.len();
        for &i in &s.items {
            seen.insert(i, ());
        }
    }
    DatasetStats::from_counts(sequences.len(), seen.len(), actions)
}

/// Suggested query window and, when MIQ attention is unlikely to help,
/// a warning.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct QueryWindowSuggestion {
    pub m: usize,
    pub warning: Option<&'static str>,
}

pub const SHORT_SEQUENCE_WARNING: &str =
    "sequences are too short for a multi-item query window (m = 1); multi-item-query attention is unlikely to help";

/// `m = max(1, round(avg actions per user / 10))`.
pub fn suggest_query_window(stats: &DatasetStats) -> QueryWindowSuggestion {
    let m = (libm::round(stats.avg_actions_user / 10.0) as usize).max(1);
    QueryWindowSuggestion { m, warning: (m == 1).then_some(SHORT_SEQUENCE_WARNING) }
}
