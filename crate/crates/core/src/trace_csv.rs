//! Plain-text trace format: one CSV row per iterate record.

use crate::error::{Error, Result};
use crate::optimizer::IterateRecord;

pub const HEADER: &str = "t,eta,j_value,v_norm,gradJ_norm,gradL_norm";

pub fn write_records(records: &[IterateRecord]) -> String {
    let mut out = String::with_capacity(24 + records.len() * 140);
    out.push_str(HEADER);
    out.push('\n');
    for r in records {
        out.push_str(&format!(
            "{},{:.16e},{:.16e},{:.16e},{:.16e},{:.16e}\n",
            r.t, r.eta, r.j_value, r.v_norm, r.grad_j_norm, r.grad_l_norm
        ));
    }
    out
}

/// Parses rows back into records. Records must be contiguous from `t = 0`.
pub fn read_records(text: &str) -> Result<Vec<IterateRecord>> {
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l.trim()));
    match lines.next() {
        Some((_, h)) if h == HEADER => {}
        _ => {
            return Err(Error::Parse {
                line: 1,
                msg: format!("expected header `{HEADER}`"),
            })
        }
    }
    let mut out = Vec::new();
    for (lineno, line) in lines {
        if line.is_empty() {
            continue;
        }
        let bad = |msg: String| Error::Parse { line: lineno, msg };
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 6 {
            return Err(bad(format!("expected 6 fields, found {}", fields.len())));
        }
        let t: usize = fields[0].parse().map_err(|_| bad(format!("bad step index `{}`", fields[0])))?;
        if t != out.len() {
            return Err(bad(format!("step index {t} out of sequence, expected {}", out.len())));
        }
        let mut vals = [0.0f64; 5];
        for (v, s) in vals.iter_mut().zip(&fields[1..]) {
            *v = s.parse().map_err(|_| bad(format!("bad number `{s}`")))?;
            if !v.is_finite() {
                return Err(bad(format!("non-finite value `{s}`")));
            }
        }
        out.push(IterateRecord {
            t,
            eta: vals[0],
            j_value: vals[1],
            v_norm: vals[2],
            grad_j_norm: vals[3],
            grad_l_norm: vals[4],
        });
    }
    if out.is_empty() {
        return Err(Error::Parse {
            line: 1,
            msg: "trace has no records".into(),
        });
    }
    Ok(out)
}
