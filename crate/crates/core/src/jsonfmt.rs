//! Number formatting shared by the dataset and checkpoint writers: every
//! float is written with 17 significant digits so parsing restores it
//! exactly.

use std::fmt::Write as _;

pub(crate) fn push_f64(out: &mut String, v: f64) {
    write!(out, "{v:.16e}").expect("write to String");
}

pub(crate) fn push_f64_array(out: &mut String, vals: impl IntoIterator<Item = f64>) {
    out.push('[');
    for (i, v) in vals.into_iter().enumerate() {
        if i > 0 {
            out.push(',');
        }
        push_f64(out, v);
    }
    out.push(']');
}

pub(crate) fn push_string(out: &mut String, s: &str) {
    out.push_str(&serde_json::to_string(s).expect("string serializes"));
}
