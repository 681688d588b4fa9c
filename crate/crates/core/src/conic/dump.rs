//! Plain-text rendering of a [`ConicProgram`] for debugging.
//!
//! Format, one item per line:
//!
//! ```text
//! vars <n>
//! block <name> <kind> <start> <len>
//! minimize <affine>
//! con <label> <cone> <rows>
//!   <affine>
//! ```
//!
//! where `<affine>` is `<constant> [+ <coeff>*x<index>]...` with coefficients
//! printed in round-trip precision.

use std::fmt::Write as _;

use super::{AffineExpr, BlockKind, Cone, ConicProgram};

fn affine(e: &AffineExpr) -> String {
    let mut s = format!("{:?}", e.constant);
    for (v, c) in &e.compact().terms {
        let _ = write!(s, " + {c:?}*x{}", v.0);
    }
    s
}

pub fn write_text(program: &ConicProgram) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "vars {}", program.num_vars());
    for b in program.blocks() {
        let kind = match b.kind {
            BlockKind::Scalar => "scalar".to_string(),
            BlockKind::Vector => "vector".to_string(),
            BlockKind::Hermitian { dim } => format!("hermitian{dim}"),
        };
        let _ = writeln!(out, "block {} {kind} {} {}", b.name, b.start, b.len);
    }
    let _ = writeln!(out, "minimize {}", affine(program.objective()));
    for c in program.constraints() {
        let cone = match c.cone {
            Cone::Psd { dim } => format!("psd{dim}"),
            Cone::Power { alpha } => format!("pow{alpha:?}"),
            other => other.name().to_string(),
        };
        let _ = writeln!(out, "con {} {cone} {}", c.label, c.rows.len());
        for r in &c.rows {
            let _ = writeln!(out, "  {}", affine(r));
        }
    }
    out
}
