//! Input-space sampling locations behind one output unit, for receptive-field
//! plots of standard versus deformable layers.

use std::io::Write;

use crate::error::{shape_err, Result};
use crate::nn::conv::ConvGeom;

/// One stage of a feature extractor as seen by the tracer.
#[derive(Clone, Debug)]
pub enum TraceLayer {
    Conv {
        /// 1-based layer number used in the output rows.
        id: usize,
        geom: ConvGeom,
        channels: usize,
        /// Output extent `(Ho, Wo)`.
        out_extent: (usize, usize),
        /// Realized offsets of one batch item, `[2·kH·kW · Ho · Wo]`
        /// (channel-major, as in the offset field). `None` for standard layers.
        offsets: Option<Vec<f64>>,
    },
    Pool {
        window: (usize, usize),
        stride: (usize, usize),
        out_extent: (usize, usize),
    },
}

impl TraceLayer {
    fn out_extent(&self) -> (usize, usize) {
        match self {
            TraceLayer::Conv { out_extent, .. } | TraceLayer::Pool { out_extent, .. } => {
                *out_extent
            }
        }
    }
}

/// Output unit to trace: index into the stack, channel and position.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TraceUnit {
    pub layer: usize,
    pub channel: usize,
    pub row: usize,
    pub col: usize,
}

/// A sampling location in the input coordinates of conv layer `layer`.
/// `tap` enumerates taps level by level: a second-level tap is
/// `parent_tap · kH·kW + t`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TracePoint {
    pub layer: usize,
    pub tap: usize,
    pub row: f64,
    pub col: f64,
}

/// Sampling locations contributing to `unit`, recursing through at most
/// `levels` convolution levels. Pool stages in between map a position to the
/// center of its window.
pub fn trace_sampling_locations(
    stack: &[TraceLayer],
    unit: TraceUnit,
    levels: usize,
) -> Result<Vec<TracePoint>> {
    let layer = stack
        .get(unit.layer)
        .ok_or_else(|| shape_err("trace", format!("layer {} out of range", unit.layer)))?;
    let (ho, wo) = layer.out_extent();
    let channels = match layer {
        TraceLayer::Conv { channels, .. } => *channels,
        TraceLayer::Pool { .. } => {
            return Err(shape_err("trace", "unit must sit on a convolution layer"));
        }
    };
    if unit.channel >= channels || unit.row >= ho || unit.col >= wo {
        return Err(shape_err(
            "trace",
            format!("unit {unit:?} outside {channels}x{ho}x{wo}"),
        ));
    }
    let mut points = Vec::new();
    // (stack index, parent tap, row, col) of the units to expand at this level.
    let mut frontier = vec![(unit.layer, 0usize, unit.row, unit.col)];
    for _ in 0..levels {
        let mut next = Vec::new();
        for &(idx, parent, r, c) in &frontier {
            let TraceLayer::Conv {
                id,
                geom,
                out_extent,
                offsets,
                ..
            } = &stack[idx]
            else {
                unreachable!("frontier only holds conv layers")
            };
            let (kh, kw) = geom.kernel;
            let taps = kh * kw;
            let locs = out_extent.0 * out_extent.1;
            let loc = r * out_extent.1 + c;
            let below = lower_conv(stack, idx);
            for i in 0..kh {
                for j in 0..kw {
                    let t = i * kw + j;
                    let mut pr = (r * geom.stride.0 + i) as f64 - geom.padding.0 as f64;
                    let mut pc = (c * geom.stride.1 + j) as f64 - geom.padding.1 as f64;
                    if let Some(off) = offsets {
                        pr += off[2 * t * locs + loc];
                        pc += off[(2 * t + 1) * locs + loc];
                    }
                    let tap = parent * taps + t;
                    points.push(TracePoint {
                        layer: *id,
                        tap,
                        row: pr,
                        col: pc,
                    });
                    if let Some(b) = below {
                        if let Some((rr, cc)) = descend(stack, idx, b, pr, pc) {
                            next.push((b, tap, rr, cc));
                        }
                    }
                }
            }
        }
        if next.is_empty() {
            break;
        }
        frontier = next;
    }
    Ok(points)
}

fn lower_conv(stack: &[TraceLayer], idx: usize) -> Option<usize> {
    (0..idx)
        .rev()
        .find(|&i| matches!(stack[i], TraceLayer::Conv { .. }))
}

/// Map a fractional location in the input of `stack[from]` down to an integer
/// unit of conv layer `to`, through any pools in between. Locations that fall
/// outside the feature map (padding) are dropped.
fn descend(
    stack: &[TraceLayer],
    from: usize,
    to: usize,
    row: f64,
    col: f64,
) -> Option<(usize, usize)> {
    let (mut r, mut c) = (row.round(), col.round());
    for layer in stack[to + 1..from].iter().rev() {
        if let TraceLayer::Pool { window, stride, .. } = layer {
            r = r * stride.0 as f64 + ((window.0 - 1) / 2) as f64;
            c = c * stride.1 as f64 + ((window.1 - 1) / 2) as f64;
        }
    }
    let (h, w) = stack[to].out_extent();
    if r < 0.0 || c < 0.0 || r >= h as f64 || c >= w as f64 {
        return None;
    }
    Some((r as usize, c as usize))
}

/// Write points as CSV rows `layer,tap,row,col`.
pub fn write_trace_csv<W: Write>(out: &mut W, points: &[TracePoint]) -> std::io::Result<()> {
    writeln!(out, "layer,tap,row,col")?;
    for p in points {
        writeln!(out, "{},{},{},{}", p.layer, p.tap, p.row, p.col)?;
    }
    Ok(())
}
