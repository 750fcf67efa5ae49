//! Vector-primitive frames for clip playback.
//!
//! Frames live in a logical `0..1 × 0..1` space with `y` pointing down. The
//! wire encoding is canonical JSON: fixed key order, reals printed with six
//! decimals, so identical content always serialises to identical bytes.

use std::fmt::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Rgb = [u8; 3];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Primitive {
    /// Top-left corner plus width and height.
    Rect { x: f64, y: f64, w: f64, h: f64, color: Rgb },
    Circle { cx: f64, cy: f64, r: f64, color: Rgb },
    /// Segment endpoints plus stroke width.
    Line { x1: f64, y1: f64, x2: f64, y2: f64, width: f64, color: Rgb },
}

impl Primitive {
    pub fn kind(&self) -> &'static str {
        match self {
            Primitive::Rect { .. } => "rect",
            Primitive::Circle { .. } => "circle",
            Primitive::Line { .. } => "line",
        }
    }

    pub fn coords(&self) -> Vec<f64> {
        match *self {
            Primitive::Rect { x, y, w, h, .. } => vec![x, y, w, h],
            Primitive::Circle { cx, cy, r, .. } => vec![cx, cy, r],
            Primitive::Line { x1, y1, x2, y2, width, .. } => vec![x1, y1, x2, y2, width],
        }
    }

    pub fn color(&self) -> Rgb {
        match *self {
            Primitive::Rect { color, .. } | Primitive::Circle { color, .. } | Primitive::Line { color, .. } => color,
        }
    }

    fn from_parts(kind: &str, coords: &[f64], color: Rgb) -> Result<Self> {
        let bad = || Error::integrity(format!("{kind} primitive with {} coordinates", coords.len()));
        Ok(match kind {
            "rect" => match *coords {
                [x, y, w, h] => Primitive::Rect { x, y, w, h, color },
                _ => return Err(bad()),
            },
            "circle" => match *coords {
                [cx, cy, r] => Primitive::Circle { cx, cy, r, color },
                _ => return Err(bad()),
            },
            "line" => match *coords {
                [x1, y1, x2, y2, width] => Primitive::Line { x1, y1, x2, y2, width, color },
                _ => return Err(bad()),
            },
            other => return Err(Error::integrity(format!("unknown primitive kind {other:?}"))),
        })
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Frame {
    pub primitives: Vec<Primitive>,
}

fn push_real(out: &mut String, v: f64) {
    // -0.000000 and 0.000000 must encode identically.
    let v = if v.abs() < 5e-7 { 0.0 } else { v };
    write!(out, "{v:.6}").expect("writing to a String cannot fail");
}

impl Frame {
    pub fn new(primitives: Vec<Primitive>) -> Self {
        Self { primitives }
    }

    /// `{"len":N,"primitives":[{"kind":..,"coords":[..],"color":[r,g,b]},..]}`
    pub fn to_wire(&self) -> String {
        let mut out = String::with_capacity(32 + 64 * self.primitives.len());
        write!(out, "{{\"len\":{},\"primitives\":[", self.primitives.len()).unwrap();
        for (i, p) in self.primitives.iter().enumerate() {
            if i > 0 {
                out.push(',');
            }
            write!(out, "{{\"kind\":\"{}\",\"coords\":[", p.kind()).unwrap();
            for (j, c) in p.coords().into_iter().enumerate() {
                if j > 0 {
                    out.push(',');
                }
                push_real(&mut out, c);
            }
            let [r, g, b] = p.color();
            write!(out, "],\"color\":[{r},{g},{b}]}}").unwrap();
        }
        out.push_str("]}");
        out
    }

    pub fn from_wire(text: &str) -> Result<Self> {
        #[derive(Deserialize)]
        struct WirePrimitive {
            kind: String,
            coords: Vec<f64>,
            color: Rgb,
        }
        #[derive(Deserialize)]
        struct WireFrame {
            len: usize,
            primitives: Vec<WirePrimitive>,
        }
        let wire: WireFrame = serde_json::from_str(text)?;
        if wire.len != wire.primitives.len() {
            return Err(Error::integrity(format!(
                "frame length prefix {} but {} primitives",
                wire.len,
                wire.primitives.len()
            )));
        }
        let primitives = wire
            .primitives
            .iter()
            .map(|p| Primitive::from_parts(&p.kind, &p.coords, p.color))
            .collect::<Result<_>>()?;
        Ok(Frame { primitives })
    }
}
