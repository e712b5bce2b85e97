//! Binary frame stream: one JSON line, then little-endian `f32` values, frame after frame.

use koopcycle::trajectory::Trajectory;
use serde::{Deserialize, Serialize};

use crate::error::{ApiError, ApiResult};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FramePreamble {
    pub version: u64,
    pub block: String,
    pub components: usize,
    pub elements: usize,
    /// Floats per frame.
    pub n_block: usize,
    pub frames: usize,
    pub stride: usize,
    pub include_closing: bool,
    pub dt: f64,
}

/// Block used when the client names none.
pub fn default_block(traj: &Trajectory) -> &str {
    let layout = &traj.layout;
    if layout.block("positions").is_ok() {
        "positions"
    } else {
        &layout.blocks[0].name
    }
}

/// `cycle` holds `T + 1` frames with the closing frame last. Frames `1..T` are
/// streamed every `stride`; the closing frame is appended on request.
pub fn encode(
    cycle: &Trajectory,
    version: u64,
    block: &str,
    stride: usize,
    include_closing: bool,
) -> ApiResult<Vec<u8>> {
    if stride == 0 {
        return Err(ApiError::bad_request("stride must be >= 1"));
    }
    let (offset, fb) = cycle
        .layout
        .block(block)
        .map_err(|e| ApiError::bad_request(e.to_string()))?;
    let n_block = fb.len();
    let period = cycle.frame_count() - 1;
    let mut indices: Vec<usize> = (0..period).step_by(stride).collect();
    if include_closing {
        indices.push(period);
    }
    let preamble = FramePreamble {
        version,
        block: block.to_string(),
        components: fb.components,
        elements: fb.elements,
        n_block,
        frames: indices.len(),
        stride,
        include_closing,
        dt: cycle.dt * stride as f64,
    };
    let mut out = serde_json::to_vec(&preamble).expect("preamble serializes");
    out.push(b'\n');
    out.reserve(indices.len() * n_block * 4);
    for k in indices {
        let frame = cycle.frame(k);
        for v in frame.rows(offset, n_block).iter() {
            out.extend_from_slice(&(*v as f32).to_le_bytes());
        }
    }
    Ok(out)
}

/// Inverse of [`encode`], used by tests and clients written in Rust.
pub fn decode(bytes: &[u8]) -> Option<(FramePreamble, Vec<Vec<f32>>)> {
    let nl = bytes.iter().position(|&b| b == b'\n')?;
    let preamble: FramePreamble = serde_json::from_slice(&bytes[..nl]).ok()?;
    let payload = &bytes[nl + 1..];
    if payload.len() != preamble.frames * preamble.n_block * 4 {
        return None;
    }
    let floats: Vec<f32> = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    let frames = if preamble.n_block == 0 {
        vec![Vec::new(); preamble.frames]
    } else {
        floats.chunks(preamble.n_block).map(<[f32]>::to_vec).collect()
    };
    Some((preamble, frames))
}

#[cfg(test)]
mod tests {
    use super::*;
    use koopcycle::numerics::Matrix;
    use koopcycle::trajectory::FieldLayout;

    fn cycle() -> Trajectory {
        let states = Matrix::from_fn(12, 6, |i, t| (i * 10 + t) as f64);
        Trajectory::new(states, 0.5, FieldLayout::positions_velocities(2, 3)).unwrap()
    }

    #[test]
    fn round_trip_with_stride() {
        let c = cycle();
        let bytes = encode(&c, 4, "positions", 2, false).unwrap();
        let (pre, frames) = decode(&bytes).unwrap();
        assert_eq!(pre.frames, 3);
        assert_eq!(pre.n_block, 6);
        assert_eq!(pre.version, 4);
        assert_eq!(frames[1][0], 2.0);
        assert_eq!(frames[2][5], 54.0);
    }

    #[test]
    fn closing_frame_appended() {
        let c = cycle();
        let (pre, frames) = decode(&encode(&c, 0, "velocities", 1, true).unwrap()).unwrap();
        assert_eq!(pre.frames, 6);
        assert_eq!(frames[5][0], 65.0);
    }

    #[test]
    fn rejects_bad_queries() {
        let c = cycle();
        assert_eq!(encode(&c, 0, "positions", 0, false).unwrap_err().status, 400);
        assert_eq!(encode(&c, 0, "height", 1, false).unwrap_err().status, 400);
        assert_eq!(default_block(&c), "positions");
    }
}
