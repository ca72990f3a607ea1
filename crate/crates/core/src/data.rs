//! Dataset manifests and diversity sampling.
//!
//! A manifest is a line-oriented JSON file (`*.manifest.jsonl`): one record
//! per patch, carrying the dataset-level tags (organ, stain, resolution)
//! alongside the patch location. Records are grouped by `dataset_id` into
//! [`DatasetManifest`]s; sampling draws evenly across datasets with a
//! per-source cap and a per-dataset percentage quota.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::imaging::ResolutionTag;
use crate::rng::RngStream;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("failed to read manifest {path}: {source}")]
    Read { path: String, source: std::io::Error },
    #[error("failed to write manifest {path}: {source}")]
    Write { path: String, source: std::io::Error },
    #[error("{path}:{line}: malformed manifest record: {source}")]
    Parse { path: String, line: usize, source: serde_json::Error },
    #[error("dataset '{dataset_id}' appears with conflicting tags")]
    ConflictingTags { dataset_id: String },
    #[error("sampling filters removed every dataset")]
    EmptyAfterFilters,
    #[error("invalid sampling policy: {0}")]
    Policy(String),
}

pub type Result<T> = std::result::Result<T, DataError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SourceKind {
    Patch,
    Wsi,
}

/// One manifest line: a single patch plus its dataset-level tags.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestRecord {
    pub dataset_id: String,
    pub kind: SourceKind,
    pub organ: String,
    pub stain: String,
    pub resolution_tag: ResolutionTag,
    pub path: String,
    pub source_id: String,
    pub x: u32,
    pub y: u32,
}

/// All records of one dataset, with its shared tags hoisted out.
#[derive(Debug, Clone)]
pub struct DatasetManifest {
    pub dataset_id: String,
    pub kind: SourceKind,
    pub organ: String,
    pub stain: String,
    pub resolution_tag: ResolutionTag,
    pub entries: Vec<ManifestRecord>,
}

#[derive(Debug, Clone, Default)]
pub struct ManifestCollection {
    pub datasets: Vec<DatasetManifest>,
}

impl ManifestCollection {
    pub fn total_entries(&self) -> usize {
        self.datasets.iter().map(|d| d.entries.len()).sum()
    }
}

/// Parse manifest files and group records by dataset. Records for the same
/// dataset may span files, but their tags must agree.
pub fn load_manifests<P: AsRef<Path>>(paths: &[P]) -> Result<ManifestCollection> {
    // ordered map so collection order is independent of file order quirks
    let mut by_id: BTreeMap<String, DatasetManifest> = BTreeMap::new();
    for p in paths {
        let path = p.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|source| DataError::Read { path: path.display().to_string(), source })?;
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let rec: ManifestRecord = serde_json::from_str(line).map_err(|source| DataError::Parse {
                path: path.display().to_string(),
                line: i + 1,
                source,
            })?;
            match by_id.get_mut(&rec.dataset_id) {
                None => {
                    by_id.insert(
                        rec.dataset_id.clone(),
                        DatasetManifest {
                            dataset_id: rec.dataset_id.clone(),
                            kind: rec.kind,
                            organ: rec.organ.clone(),
                            stain: rec.stain.clone(),
                            resolution_tag: rec.resolution_tag,
                            entries: vec![rec],
                        },
                    );
                }
                Some(ds) => {
                    if ds.kind != rec.kind
                        || ds.organ != rec.organ
                        || ds.stain != rec.stain
                        || ds.resolution_tag != rec.resolution_tag
                    {
                        return Err(DataError::ConflictingTags { dataset_id: rec.dataset_id });
                    }
                    ds.entries.push(rec);
                }
            }
        }
    }
    Ok(ManifestCollection { datasets: by_id.into_values().collect() })
}

/// Serialize records as one JSON object per line.
pub fn write_manifest(path: &Path, records: &[ManifestRecord]) -> Result<()> {
    let mut out = String::new();
    for r in records {
        let line = serde_json::to_string(r).expect("manifest record serializes");
        let _ = writeln!(out, "{line}");
    }
    std::fs::write(path, out).map_err(|source| DataError::Write { path: path.display().to_string(), source })
}

/// Tag filters; an empty set means "no constraint on that tag".
#[derive(Debug, Clone, Default, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct TagFilters {
    pub organs: Vec<String>,
    pub stains: Vec<String>,
    pub resolutions: Vec<ResolutionTag>,
}

impl TagFilters {
    pub fn accepts(&self, ds: &DatasetManifest) -> bool {
        (self.organs.is_empty() || self.organs.contains(&ds.organ))
            && (self.stains.is_empty() || self.stains.contains(&ds.stain))
            && (self.resolutions.is_empty() || self.resolutions.contains(&ds.resolution_tag))
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct SamplingPolicy {
    pub per_wsi_cap: usize,
    pub percent: f64,
    pub per_dataset_min: usize,
    pub per_dataset_max: usize,
    pub filters: TagFilters,
    pub seed: u64,
}

impl Default for SamplingPolicy {
    fn default() -> Self {
        SamplingPolicy {
            per_wsi_cap: 100,
            percent: 100.0,
            per_dataset_min: 10,
            per_dataset_max: 2000,
            filters: TagFilters::default(),
            seed: 0,
        }
    }
}

impl SamplingPolicy {
    pub fn validate(&self) -> Result<()> {
        if !(self.percent > 0.0 && self.percent <= 100.0) {
            return Err(DataError::Policy(format!("percent {} outside (0, 100]", self.percent)));
        }
        if self.per_dataset_min > self.per_dataset_max {
            return Err(DataError::Policy("per_dataset_min exceeds per_dataset_max".into()));
        }
        Ok(())
    }
}


/// For each source id, keep at most `cap` entries chosen uniformly without
/// replacement. Deterministic in (seed, dataset, source).
pub fn cap_per_source(ds: &DatasetManifest, cap: usize, seed: u64) -> Vec<ManifestRecord> {
    let mut by_source: BTreeMap<&str, Vec<&ManifestRecord>> = BTreeMap::new();
    for e in &ds.entries {
        by_source.entry(&e.source_id).or_default().push(e);
    }
    let root = RngStream::from_parts(&[seed]).derive(&ds.dataset_id);
    let mut out = Vec::new();
    for (source_id, entries) in by_source {
        if entries.len() <= cap {
            out.extend(entries.into_iter().cloned());
        } else {
            let mut rng = root.derive(source_id);
            let picks = rng.sample_without_replacement(entries.len(), cap);
            out.extend(picks.into_iter().map(|i| entries[i].clone()));
        }
    }
    out
}

/// Number of entries to draw from a dataset with `available` candidates at a
/// given percentage, clamped to [min, max] and never above `available`.
pub fn percentage_quota(available: usize, percent: f64, min: usize, max: usize) -> usize {
    let raw = (available as f64 * percent / 100.0).round_ties_even();
    let clamped = (raw.max(0.0) as usize).clamp(min, max);
    clamped.min(available)
}

/// Filter datasets by tags, cap each WSI source, draw each dataset's quota,
/// then shuffle the concatenation. Deterministic in the policy seed.
pub fn build_pretraining_set(collection: &ManifestCollection, policy: &SamplingPolicy) -> Result<Vec<ManifestRecord>> {
    policy.validate()?;
    let kept: Vec<&DatasetManifest> = collection.datasets.iter().filter(|d| policy.filters.accepts(d)).collect();
    if kept.is_empty() {
        return Err(DataError::EmptyAfterFilters);
    }
    let mut out = Vec::new();
    for ds in kept {
        let capped = if ds.kind == SourceKind::Wsi {
            cap_per_source(ds, policy.per_wsi_cap, policy.seed)
        } else {
            ds.entries.clone()
        };
        if capped.is_empty() {
            continue;
        }
        let quota = percentage_quota(capped.len(), policy.percent, policy.per_dataset_min, policy.per_dataset_max);
        let mut rng = RngStream::from_parts(&[policy.seed, 1]).derive(&ds.dataset_id);
        let picks = rng.sample_without_replacement(capped.len(), quota);
        out.extend(picks.into_iter().map(|i| capped[i].clone()));
    }
    let mut rng = RngStream::from_parts(&[policy.seed, 2]);
    rng.shuffle(&mut out);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    fn rec(dataset: &str, source: &str, idx: u32) -> ManifestRecord {
        ManifestRecord {
            dataset_id: dataset.into(),
            kind: SourceKind::Wsi,
            organ: "colon".into(),
            stain: "he".into(),
            resolution_tag: ResolutionTag::R20x,
            path: format!("{dataset}/{source}/{idx}.png"),
            source_id: source.into(),
            x: idx,
            y: 0,
        }
    }

    fn dataset(id: &str, sources: &[(&str, u32)]) -> DatasetManifest {
        let mut entries = Vec::new();
        for &(s, n) in sources {
            for i in 0..n {
                entries.push(rec(id, s, i));
            }
        }
        DatasetManifest {
            dataset_id: id.into(),
            kind: SourceKind::Wsi,
            organ: "colon".into(),
            stain: "he".into(),
            resolution_tag: ResolutionTag::R20x,
            entries,
        }
    }

    #[test]
    fn manifest_round_trip_preserves_records() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.manifest.jsonl");
        let records: Vec<ManifestRecord> = (0..5).map(|i| rec("ds1", "w1", i)).collect();
        write_manifest(&path, &records).unwrap();
        let coll = load_manifests(&[&path]).unwrap();
        assert_eq!(coll.datasets.len(), 1);
        assert_eq!(coll.datasets[0].entries, records);
    }

    #[test]
    fn empty_path_list_gives_empty_collection() {
        let coll = load_manifests::<&Path>(&[]).unwrap();
        assert!(coll.datasets.is_empty());
        assert_eq!(coll.total_entries(), 0);
    }

    #[test]
    fn malformed_line_reports_its_number() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.manifest.jsonl");
        let good = serde_json::to_string(&rec("ds1", "w1", 0)).unwrap();
        std::fs::write(&path, format!("{good}\nnot json\n")).unwrap();
        let err = load_manifests(&[&path]).unwrap_err();
        match err {
            DataError::Parse { line, .. } => assert_eq!(line, 2),
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn conflicting_tags_for_one_dataset_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.manifest.jsonl");
        let a = rec("ds1", "w1", 0);
        let mut b = rec("ds1", "w2", 1);
        b.organ = "lung".into();
        write_manifest(&path, &[a, b]).unwrap();
        assert!(matches!(load_manifests(&[&path]), Err(DataError::ConflictingTags { .. })));
    }

    #[test]
    fn cap_keeps_small_sources_whole_and_caps_large_ones() {
        let ds = dataset("ds1", &[("small", 30), ("big", 1000)]);
        let picked = cap_per_source(&ds, 100, 7);
        let small: Vec<_> = picked.iter().filter(|r| r.source_id == "small").collect();
        let big: Vec<_> = picked.iter().filter(|r| r.source_id == "big").collect();
        assert_eq!(small.len(), 30);
        assert_eq!(big.len(), 100);
        let distinct: HashSet<_> = big.iter().map(|r| r.x).collect();
        assert_eq!(distinct.len(), 100);
    }

    #[test]
    fn cap_selection_is_seed_deterministic_and_seed_sensitive() {
        let ds = dataset("ds1", &[("big", 500)]);
        let a = cap_per_source(&ds, 100, 1);
        let b = cap_per_source(&ds, 100, 1);
        assert_eq!(a, b);
        let mut any_diff = false;
        for seed in 2..22 {
            if cap_per_source(&ds, 100, seed) != a {
                any_diff = true;
            }
        }
        assert!(any_diff);
    }

    #[test]
    fn quota_fixed_points() {
        assert_eq!(percentage_quota(50_000, 1.0, 10, 2000), 500);
        assert_eq!(percentage_quota(40, 1.0, 10, 2000), 10); // round(0.4)=0 -> min
        assert_eq!(percentage_quota(5_000_000, 10.0, 10, 2000), 2000);
        assert_eq!(percentage_quota(5, 100.0, 10, 2000), 5); // never above available
        assert_eq!(percentage_quota(0, 50.0, 10, 2000), 0);
        // ties round to even: 250 * 1% = 2.5 -> 2 -> min 10; 1050*50%=525
        assert_eq!(percentage_quota(1050, 50.0, 10, 2000), 525);
    }

    #[test]
    fn quota_matches_oracle_over_random_inputs() {
        let mut rng = RngStream::from_parts(&[90]);
        for _ in 0..1000 {
            let available = rng.below(100_000);
            let percent = rng.uniform(0.01, 100.0);
            let got = percentage_quota(available, percent, 10, 2000);
            let raw = available as f64 * percent / 100.0;
            // independent oracle: round-half-even via rounding to i128 banker's style
            let floor = raw.floor();
            let frac = raw - floor;
            let rounded =
                if frac > 0.5 || (frac == 0.5 && (floor as i64) % 2 != 0) { floor + 1.0 } else { floor };
            let expect = (rounded as usize).clamp(10, 2000).min(available);
            assert_eq!(got, expect, "available={available} percent={percent}");
        }
    }

    #[test]
    fn quota_is_monotone() {
        let mut rng = RngStream::from_parts(&[91]);
        for _ in 0..300 {
            let a = rng.below(10_000);
            let p = rng.uniform(0.1, 99.0);
            assert!(percentage_quota(a + 1, p, 10, 2000) >= percentage_quota(a, p, 10, 2000));
            assert!(percentage_quota(a, p + 1.0, 10, 2000) >= percentage_quota(a, p, 10, 2000));
        }
    }

    #[test]
    fn even_sampling_across_two_datasets() {
        let coll = ManifestCollection {
            datasets: vec![dataset("a", &[("w", 10_000)]), dataset("b", &[("w", 10_000)])],
        };
        // patch kind so the per-WSI cap does not interfere
        let mut coll = coll;
        for d in &mut coll.datasets {
            d.kind = SourceKind::Patch;
            for e in &mut d.entries {
                e.kind = SourceKind::Patch;
            }
        }
        let policy = SamplingPolicy { percent: 50.0, seed: 3, ..SamplingPolicy::default() };
        let set = build_pretraining_set(&coll, &policy).unwrap();
        let from_a = set.iter().filter(|r| r.dataset_id == "a").count();
        assert_eq!(from_a, 2000);
        assert_eq!(set.len() - from_a, 2000);
    }

    #[test]
    fn no_duplicates_and_filters_are_sound() {
        let mut coll = ManifestCollection {
            datasets: vec![dataset("a", &[("w1", 300), ("w2", 50)]), dataset("b", &[("w1", 200)])],
        };
        coll.datasets[1].resolution_tag = ResolutionTag::R40x;
        for e in &mut coll.datasets[1].entries {
            e.resolution_tag = ResolutionTag::R40x;
        }
        let policy = SamplingPolicy {
            percent: 80.0,
            seed: 5,
            filters: TagFilters { resolutions: vec![ResolutionTag::R40x], ..TagFilters::default() },
            ..SamplingPolicy::default()
        };
        let set = build_pretraining_set(&coll, &policy).unwrap();
        assert!(!set.is_empty());
        assert!(set.iter().all(|r| r.resolution_tag == ResolutionTag::R40x));
        assert!(set.iter().all(|r| r.dataset_id == "b"));
        let keys: HashSet<_> = set.iter().map(|r| r.path.clone()).collect();
        assert_eq!(keys.len(), set.len());
    }

    #[test]
    fn filters_removing_everything_is_an_error() {
        let coll = ManifestCollection { datasets: vec![dataset("a", &[("w", 20)])] };
        let policy = SamplingPolicy {
            filters: TagFilters { organs: vec!["brain".into()], ..TagFilters::default() },
            ..SamplingPolicy::default()
        };
        assert!(matches!(build_pretraining_set(&coll, &policy), Err(DataError::EmptyAfterFilters)));
    }

    #[test]
    fn single_dataset_output_is_drawn_solely_from_it() {
        let coll = ManifestCollection { datasets: vec![dataset("only", &[("w", 120)])] };
        let set = build_pretraining_set(&coll, &SamplingPolicy { seed: 9, ..SamplingPolicy::default() }).unwrap();
        assert!(set.iter().all(|r| r.dataset_id == "only"));
        // 120 entries capped to 100 per source; 100% percent keeps all 100
        assert_eq!(set.len(), 100);
    }

    #[test]
    fn build_is_seed_deterministic() {
        let coll = ManifestCollection { datasets: vec![dataset("a", &[("w1", 400), ("w2", 400)])] };
        let p = SamplingPolicy { percent: 40.0, seed: 11, ..SamplingPolicy::default() };
        assert_eq!(build_pretraining_set(&coll, &p).unwrap(), build_pretraining_set(&coll, &p).unwrap());
        let p2 = SamplingPolicy { seed: 12, ..p.clone() };
        assert_ne!(build_pretraining_set(&coll, &p2).unwrap(), build_pretraining_set(&coll, &p).unwrap());
    }
}
