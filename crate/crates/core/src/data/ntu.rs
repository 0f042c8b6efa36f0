//! Reader and writer for the NTU RGB+D `.skeleton` text format.
//!
//! Layout: a frame count line; per frame a body count line; per body one
//! 10-field info line, a joint count line, then one 12-field line per joint
//! whose first three fields are the x, y, z camera coordinates.

use std::fmt::Write as _;
use std::path::Path;

use crate::data::skeleton::{SequenceMeta, SkeletonSequence, COORDS};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const NTU_JOINTS: usize = 25;
const BODY_INFO_FIELDS: usize = 10;
const JOINT_FIELDS: usize = 12;

struct Lines<'a> {
    inner: std::iter::Enumerate<std::str::Lines<'a>>,
    last: usize,
}

impl<'a> Lines<'a> {
    fn new(text: &'a str) -> Self {
        Self {
            inner: text.lines().enumerate(),
            last: 0,
        }
    }

    /// Next non-empty line with its 1-based number.
    fn next(&mut self, expecting: &str) -> Result<(usize, &'a str)> {
        for (i, line) in self.inner.by_ref() {
            self.last = i + 1;
            if !line.trim().is_empty() {
                return Ok((i + 1, line.trim()));
            }
        }
        Err(Error::Parse {
            line: self.last + 1,
            message: format!("unexpected end of file, expected {expecting}"),
        })
    }

    fn count(&mut self, expecting: &str) -> Result<(usize, usize)> {
        let (n, line) = self.next(expecting)?;
        let mut fields = line.split_whitespace();
        let value = fields.next().and_then(|f| f.parse::<usize>().ok());
        match (value, fields.next()) {
            (Some(v), None) => Ok((n, v)),
            _ => Err(Error::Parse {
                line: n,
                message: format!("expected {expecting} (one integer), found {line:?}"),
            }),
        }
    }
}

/// Parses one `.skeleton` file into `(3, T, 25, M_max)` coordinates; frames
/// with fewer bodies leave the missing entities zero.
pub fn parse_ntu_skeleton(text: &str) -> Result<Tensor<f32>> {
    let mut lines = Lines::new(text);
    let (_, frames) = lines.count("frame count")?;
    if frames == 0 {
        return Err(Error::Parse {
            line: 1,
            message: "sequence declares zero frames".into(),
        });
    }
    // Per frame, per body: the 25 joint positions.
    let mut bodies_per_frame: Vec<Vec<[[f32; COORDS]; NTU_JOINTS]>> = Vec::with_capacity(frames);
    for _ in 0..frames {
        let (_, bodies) = lines.count("body count")?;
        let mut frame = Vec::with_capacity(bodies);
        for _ in 0..bodies {
            let (n, info) = lines.next("body info line")?;
            let found = info.split_whitespace().count();
            if found != BODY_INFO_FIELDS {
                return Err(Error::Parse {
                    line: n,
                    message: format!("body info line has {found} fields, expected {BODY_INFO_FIELDS}"),
                });
            }
            let (n, joints) = lines.count("joint count")?;
            if joints != NTU_JOINTS {
                return Err(Error::Parse {
                    line: n,
                    message: format!("joint count {joints}, expected {NTU_JOINTS}"),
                });
            }
            let mut body = [[0.0f32; COORDS]; NTU_JOINTS];
            for joint in body.iter_mut() {
                let (n, line) = lines.next("joint line")?;
                let fields: Vec<&str> = line.split_whitespace().collect();
                if fields.len() != JOINT_FIELDS {
                    return Err(Error::Parse {
                        line: n,
                        message: format!(
                            "joint line has {} fields, expected {JOINT_FIELDS} (fewer joints than declared?)",
                            fields.len()
                        ),
                    });
                }
                for (slot, field) in joint.iter_mut().zip(&fields[..COORDS]) {
                    *slot = field.parse::<f32>().ok().filter(|v| v.is_finite()).ok_or_else(|| Error::Parse {
                        line: n,
                        message: format!("non-numeric coordinate {field:?}"),
                    })?;
                }
                for field in &fields[COORDS..] {
                    if field.parse::<f64>().is_err() {
                        return Err(Error::Parse {
                            line: n,
                            message: format!("non-numeric field {field:?}"),
                        });
                    }
                }
            }
            frame.push(body);
        }
        bodies_per_frame.push(frame);
    }
    let m_max = bodies_per_frame.iter().map(Vec::len).max().unwrap_or(0).max(1);
    let mut coords = Tensor::zeros([COORDS, frames, NTU_JOINTS, m_max]);
    for (t, frame) in bodies_per_frame.iter().enumerate() {
        for (e, body) in frame.iter().enumerate() {
            for (j, xyz) in body.iter().enumerate() {
                for (c, &v) in xyz.iter().enumerate() {
                    coords.set(&[c, t, j, e], v);
                }
            }
        }
    }
    Ok(coords)
}

/// Writes `(3, T, 25, M)` coordinates in `.skeleton` layout. Every frame lists
/// all `M` bodies; non-coordinate fields are zero.
pub fn write_ntu_skeleton(coords: &Tensor<f32>) -> Result<String> {
    let [COORDS, t, NTU_JOINTS, m] = *coords.shape() else {
        return Err(Error::shape(format!(
            "NTU skeletons are (3, T, 25, M), got {:?}",
            coords.shape()
        )));
    };
    let mut out = String::new();
    writeln!(out, "{t}").unwrap();
    for f in 0..t {
        writeln!(out, "{m}").unwrap();
        for e in 0..m {
            writeln!(out, "{} 0 1 1 1 1 0 0 0 2", 72057594037927936u64 + e as u64).unwrap();
            writeln!(out, "{NTU_JOINTS}").unwrap();
            for j in 0..NTU_JOINTS {
                let (x, y, z) = (coords.get(&[0, f, j, e]), coords.get(&[1, f, j, e]), coords.get(&[2, f, j, e]));
                writeln!(out, "{x} {y} {z} 0 0 0 0 0 0 0 0 2").unwrap();
            }
        }
    }
    Ok(out)
}

/// Zero-based action index from an NTU file name such as
/// `S001C001P001R001A050.skeleton`.
pub fn action_from_filename(name: &str) -> Option<usize> {
    let stem = name.strip_suffix(".skeleton").unwrap_or(name);
    let pos = stem.rfind('A')?;
    let digits = &stem[pos + 1..];
    if digits.len() != 3 {
        return None;
    }
    digits.parse::<usize>().ok()?.checked_sub(1)
}

/// Reads a `.skeleton` file; the label comes from the action code in its name.
pub fn load_ntu_file(path: &Path, sample_id: u64) -> Result<SkeletonSequence> {
    let text = std::fs::read_to_string(path)?;
    let coords = parse_ntu_skeleton(&text)?;
    let name = path.file_name().and_then(|n| n.to_str()).unwrap_or_default();
    let label = action_from_filename(name)
        .ok_or_else(|| Error::invalid(format!("no action code in file name {name:?}")))?;
    let frames = coords.shape()[1];
    if frames < 2 {
        return Err(Error::invalid(format!("{name}: single-frame sequence")));
    }
    SkeletonSequence::new(
        coords,
        label,
        SequenceMeta {
            sample_id,
            source: name.to_string(),
            original_frames: frames,
        },
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn joint_line(x: f32, y: f32, z: f32) -> String {
        format!("{x} {y} {z} 255.5 201.3 900.1 500.2 0.1 0.2 0.3 0.9 2\n")
    }

    fn fixture(frames: &[usize]) -> String {
        let mut s = format!("{}\n", frames.len());
        for &bodies in frames {
            s += &format!("{bodies}\n");
            for b in 0..bodies {
                s += "72057594037931101 0 1 1 1 1 0 0.03 -0.27 2\n25\n";
                for j in 0..25 {
                    let (j, b) = (j as f32, b as f32);
                    s += &joint_line(j + 100.0 * b, 2.0 * j, 3.0 * j);
                }
            }
        }
        s
    }

    #[test]
    fn single_body_round_trips_coordinates() {
        let c = parse_ntu_skeleton(&fixture(&[1])).unwrap();
        assert_eq!(c.shape(), &[3, 1, 25, 1]);
        for j in 0..25 {
            let jf = j as f32;
            assert_eq!([c.get(&[0, 0, j, 0]), c.get(&[1, 0, j, 0]), c.get(&[2, 0, j, 0])], [jf, 2.0 * jf, 3.0 * jf]);
        }
    }

    #[test]
    fn two_bodies_fill_both_entities() {
        let c = parse_ntu_skeleton(&fixture(&[2, 1])).unwrap();
        assert_eq!(c.shape(), &[3, 2, 25, 2]);
        assert_eq!(c.get(&[0, 0, 3, 1]), 103.0);
        // Second frame has a single body; entity 1 stays zero.
        assert_eq!(c.get(&[0, 1, 3, 1]), 0.0);
        assert_eq!(c.get(&[0, 1, 3, 0]), 3.0);
    }

    #[test]
    fn missing_joint_line_is_reported_with_line_number() {
        let mut text = fixture(&[1, 1]);
        // Drop the last joint of frame 0 (line 2 + 2 header lines + 25 joints = line 29).
        let mut lines: Vec<&str> = text.lines().collect();
        lines.remove(28);
        text = lines.join("\n");
        match parse_ntu_skeleton(&text) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 29),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn truncated_file_errors() {
        let text = fixture(&[1]);
        let cut: String = text.lines().take(10).map(|l| format!("{l}\n")).collect();
        assert!(matches!(parse_ntu_skeleton(&cut), Err(Error::Parse { line: 11, .. })));
    }

    #[test]
    fn non_numeric_field_errors() {
        let text = fixture(&[1]).replacen("255.5", "abc", 1);
        assert!(matches!(parse_ntu_skeleton(&text), Err(Error::Parse { line: 5, .. })));
        let text = fixture(&[1]).replacen("0 0 0 255.5", "0 zz 0 255.5", 1);
        assert!(matches!(parse_ntu_skeleton(&text), Err(Error::Parse { line: 5, .. })));
    }

    #[test]
    fn wrong_joint_count_errors() {
        let text = fixture(&[1]).replacen("\n25\n", "\n24\n", 1);
        assert!(matches!(parse_ntu_skeleton(&text), Err(Error::Parse { line: 4, .. })));
    }

    #[test]
    fn parse_write_parse_is_exact() {
        let first = parse_ntu_skeleton(&fixture(&[2, 2, 1])).unwrap();
        let again = parse_ntu_skeleton(&write_ntu_skeleton(&first).unwrap()).unwrap();
        assert!(first.bit_eq(&again));
    }

    #[test]
    fn action_codes() {
        assert_eq!(action_from_filename("S001C002P003R002A050.skeleton"), Some(49));
        assert_eq!(action_from_filename("S018C001P008R001A120"), Some(119));
        assert_eq!(action_from_filename("readme.txt"), None);
    }
}
