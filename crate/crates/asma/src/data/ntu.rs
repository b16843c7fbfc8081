//! Reader/writer for the NTU RGB+D `.skeleton` text layout.
//!
//! The format is line oriented:
//!
//! ```text
//! <frame count>
//!   per frame:
//!     <body count>
//!     per body:
//!       <body header: first field is the body id, rest ignored>
//!       <joint count, must be 25>
//!       25 x <joint line: x y z [extra fields ignored]>
//! ```
//!
//! Each distinct body id across the clip becomes one [`SkeletonSequence`]
//! spanning all frames; frames where a body is absent are zero-filled, so a
//! body entering mid-clip has zeros before its first appearance.

use std::collections::HashMap;
use std::sync::Arc;

use ndarray::Array3;

use super::{build_ntu_graph, DataError, SkeletonSequence, NTU_NUM_JOINTS};
use crate::Real;

struct Lines<'a> {
    inner: std::str::Lines<'a>,
    line_no: usize,
}

impl<'a> Lines<'a> {
    fn new(text: &'a str) -> Self {
        Self { inner: text.lines(), line_no: 0 }
    }

    /// Next non-empty line with its 1-based line number.
    fn next_line(&mut self) -> Option<(usize, &'a str)> {
        loop {
            let line = self.inner.next()?;
            self.line_no += 1;
            if !line.trim().is_empty() {
                return Some((self.line_no, line.trim()));
            }
        }
    }

    fn expect_line(&mut self, what: &str) -> Result<(usize, &'a str), DataError> {
        self.next_line().ok_or_else(|| DataError::MalformedRecord {
            line: self.line_no + 1,
            reason: format!("unexpected end of file, expected {what}"),
        })
    }
}

fn parse_count(line: &str, line_no: usize, what: &str) -> Result<usize, DataError> {
    let field = line.split_whitespace().next().unwrap_or("");
    field.parse::<usize>().map_err(|_| DataError::MalformedRecord {
        line: line_no,
        reason: format!("expected {what}, got {field:?}"),
    })
}

/// Parse an NTU `.skeleton` text stream into one sequence per tracked body.
///
/// Sequences are returned in order of first appearance. Joint lines must
/// carry at least three numeric fields (x y z); extra per-joint fields are
/// ignored.
pub fn parse_ntu_skeleton(text: &str) -> Result<Vec<SkeletonSequence>, DataError> {
    if text.trim().is_empty() {
        return Err(DataError::EmptyFile);
    }
    let graph = Arc::new(build_ntu_graph());
    let mut lines = Lines::new(text);

    let (ln, first) = lines.expect_line("frame count")?;
    let num_frames = parse_count(first, ln, "frame count")?;
    if num_frames == 0 {
        return Err(DataError::MalformedRecord {
            line: ln,
            reason: "frame count must be positive".into(),
        });
    }

    // body id -> (order of first appearance, C x T x V buffer)
    let mut bodies: HashMap<String, (usize, Array3<Real>)> = HashMap::new();
    let mut order: Vec<String> = Vec::new();

    for frame in 0..num_frames {
        let (ln, line) = lines.expect_line("body count")?;
        let body_count = parse_count(line, ln, "body count")?;
        for _ in 0..body_count {
            let (_, header) = lines.expect_line("body header")?;
            let body_id = header
                .split_whitespace()
                .next()
                .unwrap_or("0")
                .to_string();

            let (ln, line) = lines.expect_line("joint count")?;
            let joint_count = parse_count(line, ln, "joint count")?;
            if joint_count != NTU_NUM_JOINTS {
                return Err(DataError::MalformedRecord {
                    line: ln,
                    reason: format!(
                        "joint count must be {NTU_NUM_JOINTS}, got {joint_count}"
                    ),
                });
            }

            let entry = bodies.entry(body_id.clone()).or_insert_with(|| {
                order.push(body_id.clone());
                (order.len() - 1, Array3::zeros((3, num_frames, NTU_NUM_JOINTS)))
            });

            for v in 0..NTU_NUM_JOINTS {
                let (ln, line) = lines.expect_line("joint coordinates")?;
                let fields: Vec<&str> = line.split_whitespace().collect();
                if fields.len() < 3 {
                    return Err(DataError::MalformedRecord {
                        line: ln,
                        reason: format!(
                            "joint line needs at least 3 fields, got {}",
                            fields.len()
                        ),
                    });
                }
                for c in 0..3 {
                    let val: Real = fields[c].parse().map_err(|_| {
                        DataError::NonNumericField {
                            line: ln,
                            field: fields[c].to_string(),
                        }
                    })?;
                    entry.1[[c, frame, v]] = val;
                }
            }
        }
    }

    let mut out = Vec::with_capacity(order.len());
    for id in order {
        let (_, data) = bodies.remove(&id).expect("body recorded on first sight");
        out.push(SkeletonSequence::new(data, graph.clone(), None)?);
    }
    if out.is_empty() {
        return Err(DataError::MalformedRecord {
            line: 1,
            reason: "file contains no bodies".into(),
        });
    }
    Ok(out)
}

/// Serialize sequences back to the `.skeleton` text layout (one body per
/// sequence, present in every frame). Coordinates are printed with full
/// round-trip precision so parse → write → parse is exact.
pub fn write_ntu_skeleton(seqs: &[SkeletonSequence]) -> Result<String, DataError> {
    if seqs.is_empty() {
        return Err(DataError::InvalidSequence("no sequences to write".into()));
    }
    let t = seqs[0].frames();
    for s in seqs {
        if s.frames() != t || s.joints() != NTU_NUM_JOINTS || s.channels() != 3 {
            return Err(DataError::InvalidSequence(
                "all sequences must be 3 x T x 25 with a common T".into(),
            ));
        }
    }
    let mut out = String::new();
    out.push_str(&format!("{t}\n"));
    for frame in 0..t {
        out.push_str(&format!("{}\n", seqs.len()));
        for (i, s) in seqs.iter().enumerate() {
            out.push_str(&format!("{i} 0 0 0 0 0 0 0 0 2\n"));
            out.push_str(&format!("{NTU_NUM_JOINTS}\n"));
            for v in 0..NTU_NUM_JOINTS {
                let (x, y, z) = (
                    s.data[[0, frame, v]],
                    s.data[[1, frame, v]],
                    s.data[[2, frame, v]],
                );
                out.push_str(&format!("{x} {y} {z} 0 0 0 0 1 0 0 0 2\n"));
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Reference encoder used to build fixtures independently of
    /// `write_ntu_skeleton`.
    fn fixture(frames: usize, bodies: usize, coord: impl Fn(usize, usize, usize, usize) -> f64) -> String {
        let mut s = format!("{frames}\n");
        for t in 0..frames {
            s.push_str(&format!("{bodies}\n"));
            for b in 0..bodies {
                s.push_str(&format!("{b} 0 0 0 0 0 0 0.1 0.2 2\n25\n"));
                for v in 0..25 {
                    s.push_str(&format!(
                        "{} {} {} 9 9 9 9 1 0 0 0 2\n",
                        coord(b, 0, t, v),
                        coord(b, 1, t, v),
                        coord(b, 2, t, v)
                    ));
                }
            }
        }
        s
    }

    #[test]
    fn two_frame_single_body_shape() {
        let text = fixture(2, 1, |_, c, t, v| (c * 100 + t * 10 + v) as f64 * 0.5);
        let seqs = parse_ntu_skeleton(&text).unwrap();
        assert_eq!(seqs.len(), 1);
        assert_eq!(seqs[0].data.dim(), (3, 2, 25));
        assert_eq!(seqs[0].data[[1, 1, 3]], 0.5 * (100 + 10 + 3) as Real);
    }

    #[test]
    fn two_bodies_give_two_sequences() {
        let text = fixture(3, 2, |b, c, t, v| (b * 1000 + c * 100 + t * 10 + v) as f64);
        let seqs = parse_ntu_skeleton(&text).unwrap();
        assert_eq!(seqs.len(), 2);
        for s in &seqs {
            assert_eq!(s.data.dim(), (3, 3, 25));
        }
        assert_eq!(seqs[1].data[[0, 2, 4]], 1024.0);
    }

    #[test]
    fn body_entering_mid_clip_is_zero_filled() {
        let mut text = String::from("2\n");
        // frame 0: body A only
        text.push_str("1\nA 0 0 0 0 0 0 0 0 2\n25\n");
        for _ in 0..25 {
            text.push_str("1 1 1 0 0 0 0 1 0 0 0 2\n");
        }
        // frame 1: bodies A and B
        text.push_str("2\nA 0 0 0 0 0 0 0 0 2\n25\n");
        for _ in 0..25 {
            text.push_str("2 2 2 0 0 0 0 1 0 0 0 2\n");
        }
        text.push_str("B 0 0 0 0 0 0 0 0 2\n25\n");
        for _ in 0..25 {
            text.push_str("3 3 3 0 0 0 0 1 0 0 0 2\n");
        }
        let seqs = parse_ntu_skeleton(&text).unwrap();
        assert_eq!(seqs.len(), 2);
        assert_eq!(seqs[1].data[[0, 0, 0]], 0.0);
        assert_eq!(seqs[1].data[[0, 1, 0]], 3.0);
    }

    #[test]
    fn truncated_file_reports_line() {
        let text = fixture(2, 1, |_, _, _, _| 1.0);
        let cut: String = text.lines().take(20).map(|l| format!("{l}\n")).collect();
        match parse_ntu_skeleton(&cut) {
            Err(DataError::MalformedRecord { line, .. }) => assert_eq!(line, 21),
            other => panic!("expected MalformedRecord, got {other:?}"),
        }
    }

    #[test]
    fn short_joint_line_is_field_count_error() {
        let mut text = String::from("1\n1\n0 0 0 0 0 0 0 0 0 2\n25\n");
        text.push_str("1.0 2.0\n"); // only two fields
        for _ in 0..24 {
            text.push_str("0 0 0\n");
        }
        match parse_ntu_skeleton(&text) {
            Err(DataError::MalformedRecord { line: 5, reason }) => {
                assert!(reason.contains("3 fields"), "{reason}");
            }
            other => panic!("expected MalformedRecord at line 5, got {other:?}"),
        }
    }

    #[test]
    fn non_numeric_coordinate_is_reported() {
        let mut text = String::from("1\n1\n0 0 0 0 0 0 0 0 0 2\n25\n");
        text.push_str("1.0 abc 3.0\n");
        for _ in 0..24 {
            text.push_str("0 0 0\n");
        }
        match parse_ntu_skeleton(&text) {
            Err(DataError::NonNumericField { line: 5, field }) => assert_eq!(field, "abc"),
            other => panic!("expected NonNumericField, got {other:?}"),
        }
    }

    #[test]
    fn empty_input_is_empty_file() {
        assert!(matches!(parse_ntu_skeleton(""), Err(DataError::EmptyFile)));
        assert!(matches!(parse_ntu_skeleton("  \n \n"), Err(DataError::EmptyFile)));
    }

    #[test]
    fn wrong_joint_count_is_rejected() {
        let text = "1\n1\n0 0 0 0 0 0 0 0 0 2\n24\n";
        match parse_ntu_skeleton(text) {
            Err(DataError::MalformedRecord { line: 4, reason }) => {
                assert!(reason.contains("25"), "{reason}");
            }
            other => panic!("expected MalformedRecord at line 4, got {other:?}"),
        }
    }

    #[test]
    fn roundtrip_is_exact() {
        let text = fixture(3, 2, |b, c, t, v| {
            ((b + 1) as f64 * 0.371 + c as f64 * 1.5 - t as f64 * 0.25 + v as f64 * 0.01)
                .sin()
        });
        let seqs = parse_ntu_skeleton(&text).unwrap();
        let rewritten = write_ntu_skeleton(&seqs).unwrap();
        let reparsed = parse_ntu_skeleton(&rewritten).unwrap();
        assert_eq!(seqs.len(), reparsed.len());
        for (a, b) in seqs.iter().zip(&reparsed) {
            assert_eq!(a.data, b.data);
        }
    }
}
