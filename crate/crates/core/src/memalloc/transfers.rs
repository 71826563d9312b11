use serde::{Deserialize, Serialize};

use super::{AllocError, TilingSolution};
use crate::frontend::Binding;
use crate::ir::{Graph, Schedule};
use crate::kernels::{for_each_index, strides, Registry};
use crate::target::TargetDescription;
use crate::tileflow::{placement, TileOpts};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TileBox {
    pub origin: Vec<usize>,
    pub extent: Vec<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Dir {
    In,
    Out,
}

/// Strided 2D copy. Offsets are bytes from the base of the source and
/// destination (the buffer on the home side, the arena on the tile side).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dma2d {
    pub src: usize,
    pub dst: usize,
    pub rows: usize,
    pub row_bytes: usize,
    pub src_stride: usize,
    pub dst_stride: usize,
}

impl Dma2d {
    pub fn bytes(&self) -> usize {
        self.rows * self.row_bytes
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Transfer {
    pub tensor: String,
    /// Operand index, inputs first then the output.
    pub operand: usize,
    pub tile: usize,
    pub dir: Dir,
    pub src_level: String,
    pub dst_level: String,
    /// Arena slot (ping-pong index) on the tile side.
    pub slot: usize,
    pub descriptors: Vec<Dma2d>,
}

impl Transfer {
    pub fn bytes(&self) -> usize {
        self.descriptors.iter().map(Dma2d::bytes).sum()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Event {
    Transfer(usize),
    Compute(usize),
}

/// Tile loop of one node: output tiles, the region of every operand read
/// or written per tile, and the ordered transfer and compute events.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct NodeTransfers {
    pub node: usize,
    pub double_buffered: bool,
    pub tiles: Vec<TileBox>,
    /// `regions[tile][operand]`.
    pub regions: Vec<Vec<TileBox>>,
    /// Bytes of one arena slot per operand; zero when the operand is used
    /// in place.
    pub slot_bytes: Vec<usize>,
    pub transfers: Vec<Transfer>,
    pub events: Vec<Event>,
}

/// Per step of the schedule.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TransferSchedule {
    pub steps: Vec<NodeTransfers>,
}

impl TransferSchedule {
    pub fn is_empty(&self) -> bool {
        self.steps.iter().all(|s| s.transfers.is_empty())
    }
}

/// Splits the box `[origin, origin + extent)` of a row-major tensor into 2D
/// copies between the strided tensor and a packed tile. Returns
/// `(strided offset, packed offset, rows, row bytes, strided stride,
/// packed stride)` per copy, all in bytes.
pub fn box_descriptors(
    shape: &[usize],
    origin: &[usize],
    extent: &[usize],
    elem: usize,
) -> Vec<(usize, usize, usize, usize, usize, usize)> {
    let r = shape.len();
    if r == 0 {
        return vec![(0, 0, 1, elem, elem, elem)];
    }
    if extent.contains(&0) {
        return vec![];
    }
    let st = strides(shape);
    let pst = strides(extent);
    // Innermost dimension that is not copied whole; everything inside it is
    // one contiguous chunk.
    let mut k = r - 1;
    while k > 0 && extent[k] == shape[k] {
        k -= 1;
    }
    let row_bytes = extent[k] * st[k] * elem;
    let (rows, s_stride, p_stride, outer) = if k == 0 {
        (1, row_bytes, row_bytes, 0)
    } else {
        (extent[k - 1], st[k - 1] * elem, pst[k - 1] * elem, k - 1)
    };
    let mut out = Vec::new();
    for_each_index(&extent[..outer], |idx| {
        let mut s = 0;
        let mut p = 0;
        for d in 0..r {
            let i = if d < outer { idx[d] } else { 0 };
            s += (origin[d] + i) * st[d];
            p += i * pst[d];
        }
        out.push((s * elem, p * elem, rows, row_bytes, s_stride, p_stride));
    });
    out
}

/// Tile loops and DMA transfers for every node, in schedule order. Staged
/// operands are copied between their home level and the node's arenas;
/// operands the engine reaches directly (weight memory included) are used
/// in place and generate no transfers. With double buffering the input
/// tiles of `k + 1` are fetched and the output of `k - 1` written back
/// around the compute of tile `k`.
pub fn plan_transfers(
    ts: &TilingSolution,
    g: &Graph,
    b: &Binding,
    t: &TargetDescription,
    reg: &Registry,
    sched: &Schedule,
    opts: TileOpts,
) -> Result<TransferSchedule, AllocError> {
    let places = placement(g, b, t)?;
    let mut steps = Vec::with_capacity(sched.len());
    for &i in &sched.order {
        let n = &g.nodes[i];
        let p = &places[i];
        let shapes: Vec<Vec<usize>> = p.operands.iter().map(|o| g.buffer(&o.buffer).unwrap().shape.clone()).collect();
        let elems: Vec<usize> = p
            .operands
            .iter()
            .map(|o| g.buffer(&o.buffer).unwrap().dtype.map(|d| d.bytes()).unwrap_or(1))
            .collect();
        let ranks: Vec<usize> = shapes.iter().map(Vec::len).collect();
        let out = ranks.len() - 1;
        let spec = reg.tile_constraints_for(&b.nodes[i].kernel, n, &ranks).map_err(crate::tileflow::TileError::from)?;
        let full = |k: usize| ts.dims.get(&p.operands[k].buffer).cloned().unwrap_or_else(|| shapes[k].clone());
        let tile: Vec<usize> = full(out);
        let counts: Vec<usize> = shapes[out].iter().zip(&tile).map(|(e, t)| e.div_ceil(*t)).collect();
        let mut tiles = Vec::new();
        for_each_index(&counts, |idx| {
            let origin: Vec<usize> = idx.iter().zip(&tile).map(|(i, t)| i * t).collect();
            let extent: Vec<usize> = origin.iter().zip(&tile).zip(&shapes[out]).map(|((o, t), e)| (*t).min(e - o)).collect();
            tiles.push(TileBox { origin, extent });
        });
        if tiles.is_empty() {
            tiles.push(TileBox {
                origin: vec![0; shapes[out].len()],
                extent: shapes[out].clone(),
            });
        }
        let regions: Vec<Vec<TileBox>> = tiles
            .iter()
            .map(|tb| {
                (0..=out)
                    .map(|k| {
                        if k == out {
                            tb.clone()
                        } else {
                            let (origin, extent) = spec.input_region(k, &shapes[k], out, &tb.origin, &tb.extent);
                            TileBox { origin, extent }
                        }
                    })
                    .collect()
            })
            .collect();
        let slot_bytes: Vec<usize> = (0..=out)
            .map(|k| {
                if p.operands[k].staged {
                    t.aligned(full(k).iter().product::<usize>() * elems[k])
                } else {
                    0
                }
            })
            .collect();
        for r in &regions {
            #[allow(clippy::needless_range_loop)]
            for k in 0..=out {
                let fits = r[k].extent.iter().zip(full(k)).all(|(e, t)| *e <= t);
                if p.operands[k].staged && !fits {
                    return Err(AllocError::Other(format!(
                        "node `{}`: region of `{}` exceeds its tile",
                        n.name, p.operands[k].buffer
                    )));
                }
            }
        }
        let staged = p.operands.iter().any(|o| o.staged);
        let double = opts.double_buffer && staged;
        let factor = if opts.double_buffer { 2 } else { 1 };
        let mut transfers = Vec::new();
        let mut make = |tile: usize, dir: Dir| -> Vec<usize> {
            let ks: Vec<usize> = match dir {
                Dir::In => (0..out).collect(),
                Dir::Out => vec![out],
            };
            let mut ids = Vec::new();
            for k in ks {
                let o = &p.operands[k];
                if !o.staged {
                    continue;
                }
                let slot = tile % factor;
                let base = slot * slot_bytes[k];
                let region = &regions[tile][k];
                let descriptors = box_descriptors(&shapes[k], &region.origin, &region.extent, elems[k])
                    .into_iter()
                    .map(|(s, pk, rows, row_bytes, ss, ps)| match dir {
                        Dir::In => Dma2d {
                            src: s,
                            dst: base + pk,
                            rows,
                            row_bytes,
                            src_stride: ss,
                            dst_stride: ps,
                        },
                        Dir::Out => Dma2d {
                            src: base + pk,
                            dst: s,
                            rows,
                            row_bytes,
                            src_stride: ps,
                            dst_stride: ss,
                        },
                    })
                    .collect();
                let (src_level, dst_level) = match dir {
                    Dir::In => (o.home.clone(), p.stage_level.clone()),
                    Dir::Out => (p.stage_level.clone(), o.home.clone()),
                };
                ids.push(transfers.len());
                transfers.push(Transfer {
                    tensor: o.buffer.clone(),
                    operand: k,
                    tile,
                    dir,
                    src_level,
                    dst_level,
                    slot,
                    descriptors,
                });
            }
            ids
        };
        let n_tiles = tiles.len();
        let mut events = Vec::new();
        let push = |events: &mut Vec<Event>, ids: Vec<usize>| events.extend(ids.into_iter().map(Event::Transfer));
        if double {
            push(&mut events, make(0, Dir::In));
            for k in 0..n_tiles {
                if k + 1 < n_tiles {
                    push(&mut events, make(k + 1, Dir::In));
                }
                events.push(Event::Compute(k));
                if k > 0 {
                    push(&mut events, make(k - 1, Dir::Out));
                }
            }
            push(&mut events, make(n_tiles - 1, Dir::Out));
        } else {
            for k in 0..n_tiles {
                push(&mut events, make(k, Dir::In));
                events.push(Event::Compute(k));
                push(&mut events, make(k, Dir::Out));
            }
        }
        steps.push(NodeTransfers {
            node: i,
            double_buffered: double,
            tiles,
            regions,
            slot_bytes,
            transfers,
            events,
        });
    }
    Ok(TransferSchedule { steps })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn descriptors_of_boxes() {
        // Whole tensor: one contiguous chunk.
        assert_eq!(box_descriptors(&[4, 8], &[0, 0], &[4, 8], 1), vec![(0, 0, 1, 32, 32, 32)]);
        // Row band.
        assert_eq!(box_descriptors(&[4, 8], &[2, 0], &[2, 8], 1), vec![(16, 0, 1, 16, 16, 16)]);
        // Column band: strided rows.
        assert_eq!(box_descriptors(&[4, 8], &[0, 4], &[4, 4], 2), vec![(8, 0, 4, 8, 16, 8)]);
        // Rank 3 with a partial middle dim: one descriptor per outer index.
        let d = box_descriptors(&[2, 4, 3], &[0, 1, 0], &[2, 2, 3], 1);
        assert_eq!(d, vec![(3, 0, 2, 6, 12, 6)]);
        let d = box_descriptors(&[2, 4, 3], &[0, 1, 1], &[2, 2, 2], 1);
        assert_eq!(d, vec![(4, 0, 2, 2, 3, 2), (16, 4, 2, 2, 3, 2)]);
    }
}
