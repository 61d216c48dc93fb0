//! Cross-attention capture and aggregation.
//!
//! The capture buffer is the in-process stand-in for an instrumented runtime
//! that copies per-layer, per-head attention off the device during decoding.
//! Captured rows carry single-precision values (stored as f64), exactly what
//! a device-side f32 buffer copy would hold; this also makes the binary dump
//! format lossless.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

/// Rounds to the nearest f32, keeping f64 storage.
pub fn capture_precision(x: f64) -> f64 {
    x as f32 as f64
}

/// One captured attention row: probabilities over history positions produced
/// at decoding step `step` by (`layer`, `head`). Layers are 0-based.
#[derive(Debug, Clone)]
pub struct AttentionRecord {
    pub layer: usize,
    pub head: usize,
    pub step: usize,
    pub row: Vec<f64>,
}

/// Append-only store of attention records for a single turn.
#[derive(Debug, Clone)]
pub struct CaptureBuffer {
    layers: usize,
    heads: usize,
    hist_len: usize,
    capacity: usize,
    records: Vec<AttentionRecord>,
    steps: usize,
}

impl CaptureBuffer {
    /// `capacity` bounds the number of decoding steps retained.
    pub fn new(layers: usize, heads: usize, hist_len: usize, capacity: usize) -> Self {
        CaptureBuffer {
            layers,
            heads,
            hist_len,
            capacity,
            records: Vec::new(),
            steps: 0,
        }
    }

    pub fn records(&self) -> &[AttentionRecord] {
        &self.records
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn hist_len(&self) -> usize {
        self.hist_len
    }

    /// Appends one record. Rows must already be normalized probabilities over
    /// the turn's history positions.
    pub fn record_step(&mut self, rec: AttentionRecord) -> Result<()> {
        if rec.row.len() != self.hist_len {
            return Err(Error::AttentionShapeMismatch {
                row_len: rec.row.len(),
                hist_len: self.hist_len,
            });
        }
        let sum: f64 = rec.row.iter().sum();
        if (sum - 1.0).abs() > 1e-4 {
            return Err(Error::UnnormalizedRow { sum });
        }
        if rec.row.iter().any(|&x| x < 0.0) {
            return Err(Error::InvalidProbabilityRow);
        }
        if rec.step >= self.capacity {
            return Err(Error::CaptureCapacity {
                steps: rec.step + 1,
                capacity: self.capacity,
            });
        }
        self.steps = self.steps.max(rec.step + 1);
        self.records.push(rec);
        Ok(())
    }

    /// True once every (layer, head) pair has a record for `step`.
    pub fn step_complete(&self, step: usize) -> bool {
        let mut seen = vec![false; self.layers * self.heads];
        for rec in &self.records {
            if rec.step == step {
                seen[rec.layer * self.heads + rec.head] = true;
            }
        }
        seen.iter().all(|&s| s)
    }
}

/// Layer/head-averaged attention for one turn: `steps x hist_len`.
#[derive(Debug, Clone)]
pub struct AggregatedAttention {
    pub steps: usize,
    pub hist_len: usize,
    pub l_prime: usize,
    pub heads_averaged: usize,
    data: Vec<f64>,
}

impl AggregatedAttention {
    pub fn from_rows(rows: Vec<Vec<f64>>, l_prime: usize, heads_averaged: usize) -> Self {
        let steps = rows.len();
        let hist_len = rows.first().map_or(0, |r| r.len());
        let mut data = Vec::with_capacity(steps * hist_len);
        for row in rows {
            assert_eq!(row.len(), hist_len, "ragged attention rows");
            data.extend_from_slice(&row);
        }
        AggregatedAttention {
            steps,
            hist_len,
            l_prime,
            heads_averaged,
            data,
        }
    }

    pub fn row(&self, step: usize) -> &[f64] {
        &self.data[step * self.hist_len..(step + 1) * self.hist_len]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        (0..self.steps).map(move |s| self.row(s))
    }

    /// Cumulative attention mass per history position across all steps.
    pub fn column_mass(&self) -> Vec<f64> {
        let mut mass = vec![0.0; self.hist_len];
        for row in self.rows() {
            for (m, &a) in mass.iter_mut().zip(row) {
                *m += a;
            }
        }
        mass
    }

    /// Drops history positions where `keep` is false, renormalizing each row
    /// to sum 1. Returns the number of rows that needed renormalization (rows
    /// that had mass on removed positions).
    pub fn remove_positions(&self, keep: &[bool]) -> (AggregatedAttention, usize) {
        assert_eq!(keep.len(), self.hist_len);
        let mut renormalized = 0;
        let mut rows = Vec::with_capacity(self.steps);
        for row in self.rows() {
            let kept: Vec<f64> = row
                .iter()
                .zip(keep)
                .filter(|(_, &k)| k)
                .map(|(&a, _)| a)
                .collect();
            let sum: f64 = kept.iter().sum();
            let dropped_mass = 1.0 - sum;
            if dropped_mass.abs() > 1e-12 && sum > 0.0 {
                renormalized += 1;
                rows.push(kept.iter().map(|&a| capture_precision(a / sum)).collect());
            } else {
                rows.push(kept);
            }
        }
        (
            AggregatedAttention::from_rows(rows, self.l_prime, self.heads_averaged),
            renormalized,
        )
    }
}

/// Averages the recorded rows of the final `l_prime` layers (and all heads)
/// into a single matrix. Requires complete records for every step.
pub fn aggregate(buffer: &CaptureBuffer, l_prime: usize) -> Result<AggregatedAttention> {
    assert!(
        l_prime >= 1 && l_prime <= buffer.layers,
        "l_prime must be in 1..=layers"
    );
    let first_layer = buffer.layers - l_prime;
    let denom = (l_prime * buffer.heads) as f64;
    let mut rows = vec![vec![0.0f64; buffer.hist_len]; buffer.steps];
    let mut total = vec![0usize; buffer.steps];
    let mut in_window = vec![0usize; buffer.steps];
    for rec in &buffer.records {
        total[rec.step] += 1;
        if rec.layer < first_layer {
            continue;
        }
        in_window[rec.step] += 1;
        for (acc, &a) in rows[rec.step].iter_mut().zip(&rec.row) {
            *acc += a;
        }
    }
    for step in 0..buffer.steps {
        if total[step] != buffer.layers * buffer.heads
            || in_window[step] != l_prime * buffer.heads
        {
            return Err(Error::MissingRecords { step });
        }
    }
    for row in &mut rows {
        for a in row.iter_mut() {
            *a = capture_precision(*a / denom);
        }
    }
    Ok(AggregatedAttention::from_rows(
        rows,
        l_prime,
        buffer.heads,
    ))
}

// ---------------------------------------------------------------------------
// Binary attention dump: magic "ATTN", u32 version=1, u32 turns; per turn:
// u32 steps, u32 hist_len, u32 l_prime, then steps*hist_len f32 row-major.
// All integers and floats little-endian.
// ---------------------------------------------------------------------------

const DUMP_MAGIC: &[u8; 4] = b"ATTN";
const DUMP_VERSION: u32 = 1;

pub fn write_attention_dump(path: &Path, turns: &[AggregatedAttention]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    f.write_all(DUMP_MAGIC)?;
    f.write_all(&DUMP_VERSION.to_le_bytes())?;
    f.write_all(&(turns.len() as u32).to_le_bytes())?;
    for turn in turns {
        f.write_all(&(turn.steps as u32).to_le_bytes())?;
        f.write_all(&(turn.hist_len as u32).to_le_bytes())?;
        f.write_all(&(turn.l_prime as u32).to_le_bytes())?;
        for &x in &turn.data {
            f.write_all(&(x as f32).to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn read_attention_dump(path: &Path) -> Result<Vec<AggregatedAttention>> {
    let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut magic = [0u8; 4];
    f.read_exact(&mut magic)?;
    if &magic != DUMP_MAGIC {
        return Err(Error::DumpFormat("bad magic".into()));
    }
    let version = read_u32(&mut f)?;
    if version != DUMP_VERSION {
        return Err(Error::DumpFormat(format!("unsupported version {version}")));
    }
    let n_turns = read_u32(&mut f)? as usize;
    let mut turns = Vec::with_capacity(n_turns);
    for _ in 0..n_turns {
        let steps = read_u32(&mut f)? as usize;
        let hist_len = read_u32(&mut f)? as usize;
        let l_prime = read_u32(&mut f)? as usize;
        let mut data = Vec::with_capacity(steps * hist_len);
        let mut buf = [0u8; 4];
        for _ in 0..steps * hist_len {
            f.read_exact(&mut buf)?;
            data.push(f32::from_le_bytes(buf) as f64);
        }
        turns.push(AggregatedAttention {
            steps,
            hist_len,
            l_prime,
            heads_averaged: 0, // not carried by the file format
            data,
        });
    }
    Ok(turns)
}

fn read_u32(f: &mut impl Read) -> Result<u32> {
    let mut buf = [0u8; 4];
    f.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn rec(layer: usize, head: usize, step: usize, row: &[f64]) -> AttentionRecord {
        AttentionRecord {
            layer,
            head,
            step,
            row: row.to_vec(),
        }
    }

    #[test]
    fn record_smallest_case() {
        let mut buf = CaptureBuffer::new(1, 1, 1, 8);
        buf.record_step(rec(0, 0, 0, &[1.0])).unwrap();
        assert_eq!(buf.records().len(), 1);
        assert!(buf.step_complete(0));
    }

    #[test]
    fn record_shape_mismatch() {
        let mut buf = CaptureBuffer::new(1, 1, 4, 8);
        let err = buf
            .record_step(rec(0, 0, 0, &[0.5, 0.25, 0.25]))
            .unwrap_err();
        assert!(matches!(
            err,
            Error::AttentionShapeMismatch {
                row_len: 3,
                hist_len: 4
            }
        ));
    }

    #[test]
    fn record_rejects_unnormalized() {
        let mut buf = CaptureBuffer::new(1, 1, 2, 8);
        let err = buf.record_step(rec(0, 0, 0, &[0.6, 0.6])).unwrap_err();
        assert!(matches!(err, Error::UnnormalizedRow { .. }));
    }

    #[test]
    fn full_step_coverage_enables_aggregation() {
        let mut buf = CaptureBuffer::new(2, 2, 2, 8);
        for layer in 0..2 {
            for head in 0..2 {
                buf.record_step(rec(layer, head, 0, &[0.5, 0.5])).unwrap();
            }
        }
        assert_eq!(buf.records().len(), 4);
        assert!(buf.step_complete(0));
        assert!(aggregate(&buf, 2).is_ok());
    }

    #[test]
    fn aggregate_identity_single_layer_head() {
        let mut buf = CaptureBuffer::new(1, 1, 2, 8);
        buf.record_step(rec(0, 0, 0, &[0.25, 0.75])).unwrap();
        buf.record_step(rec(0, 0, 1, &[0.5, 0.5])).unwrap();
        let agg = aggregate(&buf, 1).unwrap();
        assert_eq!(agg.row(0), &[0.25, 0.75]);
        assert_eq!(agg.row(1), &[0.5, 0.5]);
    }

    #[test]
    fn aggregate_hand_average() {
        // L=2, l_prime=2, 1 head: rows [0.2,0.8] and [0.6,0.4] -> [0.4,0.6].
        let mut buf = CaptureBuffer::new(2, 1, 2, 8);
        buf.record_step(rec(0, 0, 0, &[0.2, 0.8])).unwrap();
        buf.record_step(rec(1, 0, 0, &[0.6, 0.4])).unwrap();
        let agg = aggregate(&buf, 2).unwrap();
        let row = agg.row(0);
        assert!((row[0] - 0.4).abs() < 1e-7);
        assert!((row[1] - 0.6).abs() < 1e-7);
    }

    #[test]
    fn aggregate_last_layer_only() {
        // L=3, l_prime=1: only layer index 2 contributes.
        let mut buf = CaptureBuffer::new(3, 1, 2, 8);
        buf.record_step(rec(0, 0, 0, &[1.0, 0.0])).unwrap();
        buf.record_step(rec(1, 0, 0, &[1.0, 0.0])).unwrap();
        buf.record_step(rec(2, 0, 0, &[0.25, 0.75])).unwrap();
        let agg = aggregate(&buf, 1).unwrap();
        assert_eq!(agg.row(0), &[0.25, 0.75]);
    }

    #[test]
    fn aggregate_missing_records_errors() {
        let mut buf = CaptureBuffer::new(2, 1, 2, 8);
        buf.record_step(rec(1, 0, 0, &[0.5, 0.5])).unwrap();
        assert!(matches!(
            aggregate(&buf, 2),
            Err(Error::MissingRecords { step: 0 })
        ));
    }

    #[test]
    fn injection_one_frozen_head_averages_in() {
        // Two heads, one frozen to a fixed row: aggregate = mean of both.
        let frozen = [0.125, 0.875];
        let other = [0.5, 0.5];
        let mut buf = CaptureBuffer::new(1, 2, 2, 8);
        buf.record_step(rec(0, 0, 0, &frozen)).unwrap();
        buf.record_step(rec(0, 1, 0, &other)).unwrap();
        let agg = aggregate(&buf, 1).unwrap();
        assert_eq!(agg.row(0), &[0.3125, 0.6875]);
    }

    #[test]
    fn remove_positions_renormalizes() {
        let agg = AggregatedAttention::from_rows(vec![vec![0.5, 0.25, 0.25]], 1, 1);
        let (pruned, renormed) = agg.remove_positions(&[true, false, true]);
        assert_eq!(renormed, 1);
        assert_eq!(pruned.hist_len, 2);
        let row = pruned.row(0);
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        assert!((row[0] - 2.0 / 3.0).abs() < 1e-6);
    }

    #[test]
    fn dump_round_trip_is_lossless() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("attn.bin");
        let turns = vec![
            AggregatedAttention::from_rows(
                vec![
                    vec![capture_precision(0.3), capture_precision(0.7)],
                    vec![capture_precision(0.6), capture_precision(0.4)],
                ],
                1,
                2,
            ),
            AggregatedAttention::from_rows(vec![vec![1.0]], 2, 1),
        ];
        write_attention_dump(&path, &turns).unwrap();
        let bytes1 = std::fs::read(&path).unwrap();
        let back = read_attention_dump(&path).unwrap();
        assert_eq!(back.len(), 2);
        for (a, b) in turns.iter().zip(&back) {
            assert_eq!(a.steps, b.steps);
            assert_eq!(a.hist_len, b.hist_len);
            assert_eq!(a.l_prime, b.l_prime);
            for s in 0..a.steps {
                assert_eq!(a.row(s), b.row(s), "capture-precision values round-trip");
            }
        }
        write_attention_dump(&path, &back).unwrap();
        let bytes2 = std::fs::read(&path).unwrap();
        assert_eq!(bytes1, bytes2, "byte-exact re-serialization");
    }

    proptest! {
        // Aggregation of identical capture-precision rows across layers and
        // heads is a fixed point, and rows stay normalized.
        #[test]
        fn aggregate_fixed_point(raw in proptest::collection::vec(0.01f64..1.0, 2..6)) {
            let sum: f64 = raw.iter().sum();
            let row: Vec<f64> = raw.iter().map(|&x| capture_precision(x / sum)).collect();
            let mut buf = CaptureBuffer::new(2, 2, row.len(), 4);
            for layer in 0..2 {
                for head in 0..2 {
                    buf.record_step(rec(layer, head, 0, &row))?;
                }
            }
            let agg = aggregate(&buf, 2).unwrap();
            prop_assert_eq!(agg.row(0), &row[..]);
            let total: f64 = agg.row(0).iter().sum();
            prop_assert!((total - 1.0).abs() < 2e-4);
            prop_assert!(agg.row(0).iter().all(|&a| a >= 0.0));
        }
    }
}
