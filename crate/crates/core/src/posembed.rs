//! Positional machinery: box extraction from masks, sinusoidal box
//! encodings, the learned projection that turns them into per-query
//! embeddings, and the static table used for local queries.

use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::mask::BinaryMask;
use crate::nn::{Init, Mlp};
use crate::numcore::{Bound, Decision, Graph, ParamId, ParamSet, Var};

pub const TEMPERATURE: f64 = 10_000.0;

/// Normalized `(cx, cy, w, h)` box.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BoxCxCyWH {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

impl BoxCxCyWH {
    /// The box of an empty mask.
    pub const EMPTY: BoxCxCyWH = BoxCxCyWH {
        cx: 0.5,
        cy: 0.5,
        w: 0.0,
        h: 0.0,
    };

    pub const WHOLE_FRAME: BoxCxCyWH = BoxCxCyWH {
        cx: 0.5,
        cy: 0.5,
        w: 1.0,
        h: 1.0,
    };

    pub fn coords(&self) -> [f64; 4] {
        [self.cx, self.cy, self.w, self.h]
    }
}

/// Tight box around the foreground, pixels treated as unit cells.
pub fn mask2box(mask: &BinaryMask) -> BoxCxCyWH {
    let (h, w) = (mask.height(), mask.width());
    let mut rmin = usize::MAX;
    let mut rmax = 0;
    let mut cmin = usize::MAX;
    let mut cmax = 0;
    for r in 0..h {
        for c in 0..w {
            if mask.get(r, c) {
                rmin = rmin.min(r);
                rmax = rmax.max(r);
                cmin = cmin.min(c);
                cmax = cmax.max(c);
            }
        }
    }
    if rmin == usize::MAX {
        return BoxCxCyWH::EMPTY;
    }
    let (wf, hf) = (w as f64, h as f64);
    BoxCxCyWH {
        cx: (cmin + cmax + 1) as f64 / (2.0 * wf),
        cy: (rmin + rmax + 1) as f64 / (2.0 * hf),
        w: (cmax - cmin + 1) as f64 / wf,
        h: (rmax - rmin + 1) as f64 / hf,
    }
}

/// Appends the interleaved sin/cos expansion of one scalar coordinate.
fn encode_coord(x: f64, d: usize, out: &mut Vec<f64>) {
    let scaled = 2.0 * PI * x;
    for i in 0..d / 2 {
        let freq = TEMPERATURE.powf(2.0 * i as f64 / d as f64);
        let a = scaled / freq;
        out.push(a.sin());
        out.push(a.cos());
    }
}

/// Sinusoidal encoding of width `4·d_per_coord`, coordinate blocks in the
/// order `(cx, cy, w, h)`.
pub fn sinusoidal_box_encode(b: &BoxCxCyWH, d_per_coord: usize) -> Result<Vec<f64>> {
    if d_per_coord == 0 || d_per_coord % 2 != 0 {
        return Err(Error::config(format!(
            "per-coordinate encoding width must be even and positive, got {d_per_coord}"
        )));
    }
    let mut out = Vec::with_capacity(4 * d_per_coord);
    for x in b.coords() {
        encode_coord(x, d_per_coord, &mut out);
    }
    Ok(out)
}

/// Fixed 2-D sinusoidal encoding of token-cell centers, `[rows·cols × width]`
/// in row-major cell order.
pub fn grid_position_encoding(rows: usize, cols: usize, width: usize) -> Result<Vec<f64>> {
    if width % 4 != 0 {
        return Err(Error::config(format!(
            "grid encoding width must be a multiple of 4, got {width}"
        )));
    }
    let mut out = Vec::with_capacity(rows * cols * width);
    for r in 0..rows {
        for c in 0..cols {
            let x = (c as f64 + 0.5) / cols as f64;
            let y = (r as f64 + 0.5) / rows as f64;
            encode_coord(x, width / 2, &mut out);
            encode_coord(y, width / 2, &mut out);
        }
    }
    Ok(out)
}

/// Learned projection from a `2c`-wide box encoding to a `c`-wide
/// positional embedding (one hidden layer of width `2c`).
#[derive(Clone, Debug)]
pub struct BoxEmbedder {
    pub mlp: Mlp,
    pub width: usize,
}

impl BoxEmbedder {
    pub fn new(ps: &mut ParamSet, init: &mut Init, name: &str, width: usize) -> Result<Self> {
        if width % 4 != 0 {
            return Err(Error::config(format!(
                "box embedding width must be a multiple of 4, got {width}"
            )));
        }
        Ok(BoxEmbedder {
            mlp: Mlp::new(ps, init, name, 2 * width, 2 * width, width),
            width,
        })
    }

    /// Rows of `encodings: [N × 2c]` projected to `[N × c]`.
    pub fn project(&self, g: &mut Graph, p: &Bound, encodings: Var) -> Result<Var> {
        let shape = g.shape(encodings);
        if shape.len() != 2 || shape[1] != 2 * self.width {
            return Err(Error::Dimension {
                op: "box_pe_project",
                lhs: shape.to_vec(),
                rhs: vec![2 * self.width],
            });
        }
        self.mlp.forward(g, p, encodings)
    }

    /// `MLP(PE(box))` for each box, `[N × c]`.
    pub fn embed_boxes(&self, g: &mut Graph, p: &Bound, boxes: &[BoxCxCyWH]) -> Result<Var> {
        let mut enc = Vec::with_capacity(boxes.len() * 2 * self.width);
        for b in boxes {
            enc.extend(sinusoidal_box_encode(b, self.width / 2)?);
        }
        let e = g.constant(vec![boxes.len(), 2 * self.width], enc)?;
        self.project(g, p, e)
    }

    /// Positional embeddings from masks: `MLP(PE(Mask2Box(mask)))` per row.
    pub fn embed_masks(&self, g: &mut Graph, p: &Bound, masks: &[BinaryMask]) -> Result<Var> {
        let boxes: Vec<_> = masks.iter().map(mask2box).collect();
        self.embed_boxes(g, p, &boxes)
    }
}

/// Binarizes `[N × P]` mask logits through the graph's decision log.
pub fn binarize_masks(g: &mut Graph, logits: Var, height: usize, width: usize) -> Result<Vec<BinaryMask>> {
    let computed: Vec<bool> = g.data(logits).iter().map(|&l| l > 0.0).collect();
    let Decision::Mask(bits) = g.decide(Decision::Mask(computed))? else {
        return Err(Error::contract("expected a mask decision"));
    };
    bits.chunks(height * width)
        .map(|c| BinaryMask::new(height, width, c.to_vec()))
        .collect()
}

/// Frame-independent learnable embeddings for the local-query slots.
#[derive(Clone, Debug)]
pub struct StaticLocalPE {
    pub table: ParamId,
    pub slots: usize,
}

impl StaticLocalPE {
    pub fn new(ps: &mut ParamSet, init: &mut Init, name: &str, slots: usize, width: usize) -> Self {
        StaticLocalPE {
            table: ps.add(name, init.table(slots, width)),
            slots,
        }
    }

    pub fn var(&self, p: &Bound) -> Var {
        p.var(self.table)
    }
}
