//! Line-oriented text form of a pruning plan.
//!
//! ```text
//! pruning-plan v1
//! magnitude 0.96
//! epoch 1
//! layer layer4.0.conv1 0110...
//! warning <text>
//! ```
//! Floats use the shortest representation that parses back to the same bits.

use pam_core::pruning::{LayerMask, PruningPlan};

use crate::error::{Error, Result};

const HEADER: &str = "pruning-plan v1";

pub fn plan_to_text(plan: &PruningPlan) -> String {
    let mut out = String::new();
    out.push_str(HEADER);
    out.push('\n');
    out.push_str(&format!("magnitude {:?}\n", plan.magnitude));
    out.push_str(&format!("epoch {}\n", plan.created_at_epoch));
    for l in &plan.layers {
        let bits: String = l.keep.iter().map(|&k| if k { '1' } else { '0' }).collect();
        out.push_str(&format!("layer {} {bits}\n", l.layer_id));
    }
    for w in &plan.warnings {
        out.push_str(&format!("warning {}\n", w.replace('\n', " ")));
    }
    out
}

pub fn plan_from_text(text: &str) -> Result<PruningPlan> {
    let bad = |line: usize, msg: &str| Error::Format(format!("plan line {}: {msg}", line + 1));
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, HEADER)) => {}
        _ => return Err(Error::Format(format!("plan must start with '{HEADER}'"))),
    }
    let mut magnitude = None;
    let mut epoch = None;
    let mut layers = Vec::new();
    let mut warnings = Vec::new();
    for (i, line) in lines {
        let (key, rest) = line.split_once(' ').ok_or_else(|| bad(i, "expected '<key> <value>'"))?;
        match key {
            "magnitude" => magnitude = Some(rest.parse::<f32>().map_err(|_| bad(i, "bad magnitude"))?),
            "epoch" => epoch = Some(rest.parse::<usize>().map_err(|_| bad(i, "bad epoch"))?),
            "layer" => {
                let (id, bits) = rest.split_once(' ').ok_or_else(|| bad(i, "expected 'layer <id> <bits>'"))?;
                let keep = bits
                    .chars()
                    .map(|c| match c {
                        '1' => Ok(true),
                        '0' => Ok(false),
                        _ => Err(bad(i, "mask must be 0/1 characters")),
                    })
                    .collect::<Result<Vec<bool>>>()?;
                if keep.is_empty() {
                    return Err(bad(i, "empty mask"));
                }
                layers.push(LayerMask { layer_id: id.to_string(), keep });
            }
            "warning" => warnings.push(rest.to_string()),
            _ => return Err(bad(i, "unknown key")),
        }
    }
    Ok(PruningPlan {
        magnitude: magnitude.ok_or_else(|| Error::Format("plan has no magnitude".into()))?,
        created_at_epoch: epoch.ok_or_else(|| Error::Format("plan has no epoch".into()))?,
        layers,
        warnings,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn awkward_floats_survive() {
        for m in [0.96f32, 0.1, 1.0 / 3.0, 0.0, f32::EPSILON, 0.999_999_94] {
            let plan = PruningPlan { magnitude: m, created_at_epoch: 3, layers: vec![], warnings: vec![] };
            let back = plan_from_text(&plan_to_text(&plan)).unwrap();
            assert_eq!(back.magnitude.to_bits(), m.to_bits());
        }
    }

    #[test]
    fn rejects_garbage() {
        assert!(plan_from_text("hello").is_err());
        assert!(plan_from_text("pruning-plan v1\nmagnitude x\nepoch 1\n").is_err());
        assert!(plan_from_text("pruning-plan v1\nmagnitude 0.5\nepoch 1\nlayer a 012\n").is_err());
    }
}
