//! Flow files and colour-wheel rendering.
//!
//! A flow file is `"BFLO" | width u32 | height u32 | (u, v) f32 pairs`, all
//! little-endian, pixels in row-major order.

use std::io::{Read, Write};

use super::FlowField;
use crate::error::{CoreError, Result};
use crate::image_io::write_ppm;

pub const FLOW_MAGIC: &[u8; 4] = b"BFLO";

pub fn write_flo<W: Write>(out: &mut W, flow: &FlowField) -> Result<()> {
    let (h, w) = (flow.height(), flow.width());
    out.write_all(FLOW_MAGIC)?;
    for extent in [w, h] {
        let e = u32::try_from(extent).map_err(|_| CoreError::Format(format!("extent {extent} exceeds u32")))?;
        out.write_all(&e.to_le_bytes())?;
    }
    let mut buf = Vec::with_capacity(8 * h * w);
    for (&u, &v) in flow.u().iter().zip(flow.v()) {
        buf.extend_from_slice(&(u as f32).to_le_bytes());
        buf.extend_from_slice(&(v as f32).to_le_bytes());
    }
    out.write_all(&buf)?;
    Ok(())
}

pub fn read_flo<R: Read>(input: &mut R) -> Result<FlowField> {
    let mut header = [0u8; 12];
    input.read_exact(&mut header)?;
    if &header[..4] != FLOW_MAGIC {
        return Err(CoreError::Format("missing BFLO magic".into()));
    }
    let w = u32::from_le_bytes(header[4..8].try_into().expect("4 bytes")) as usize;
    let h = u32::from_le_bytes(header[8..12].try_into().expect("4 bytes")) as usize;
    let mut payload = vec![0u8; 8 * w * h];
    input.read_exact(&mut payload)?;
    let mut u = Vec::with_capacity(w * h);
    let mut v = Vec::with_capacity(w * h);
    for px in payload.chunks_exact(8) {
        u.push(f32::from_le_bytes(px[..4].try_into().expect("4 bytes")) as f64);
        v.push(f32::from_le_bytes(px[4..].try_into().expect("4 bytes")) as f64);
    }
    FlowField::from_components(h, w, u, v)
}

/// Hue segments of the wheel: red-yellow, yellow-green, green-cyan,
/// cyan-blue, blue-magenta, magenta-red.
const SEGMENTS: [usize; 6] = [15, 6, 4, 11, 13, 6];

fn color_wheel() -> Vec<[f64; 3]> {
    let mut wheel = Vec::with_capacity(SEGMENTS.iter().sum());
    let ramp = |i: usize, n: usize| (255 * i / n) as f64;
    let [ry, yg, gc, cb, bm, mr] = SEGMENTS;
    wheel.extend((0..ry).map(|i| [255.0, ramp(i, ry), 0.0]));
    wheel.extend((0..yg).map(|i| [255.0 - ramp(i, yg), 255.0, 0.0]));
    wheel.extend((0..gc).map(|i| [0.0, 255.0, ramp(i, gc)]));
    wheel.extend((0..cb).map(|i| [0.0, 255.0 - ramp(i, cb), 255.0]));
    wheel.extend((0..bm).map(|i| [ramp(i, bm), 0.0, 255.0]));
    wheel.extend((0..mr).map(|i| [255.0, 0.0, 255.0 - ramp(i, mr)]));
    wheel
}

/// Colour-wheel encoding: hue from direction, saturation from magnitude
/// relative to `max_radius` (the largest magnitude in the field when `None`).
/// Returns interleaved RGB bytes.
pub fn flow_to_rgb(flow: &FlowField, max_radius: Option<f64>) -> Vec<u8> {
    let wheel = color_wheel();
    let ncols = wheel.len();
    let max_rad = max_radius.unwrap_or_else(|| {
        flow.u()
            .iter()
            .zip(flow.v())
            .map(|(u, v)| u.hypot(*v))
            .fold(0.0, f64::max)
    });
    let norm = if max_rad > 0.0 { max_rad } else { 1.0 };
    let mut rgb = Vec::with_capacity(3 * flow.u().len());
    for (&u, &v) in flow.u().iter().zip(flow.v()) {
        let (u, v) = (u / norm, v / norm);
        let rad = u.hypot(v);
        let a = (-v).atan2(-u) / std::f64::consts::PI;
        let fk = (a + 1.0) / 2.0 * (ncols - 1) as f64;
        let k0 = (fk.floor() as usize).min(ncols - 1);
        let k1 = (k0 + 1) % ncols;
        let f = fk - k0 as f64;
        for ch in 0..3 {
            let col = (1.0 - f) * wheel[k0][ch] / 255.0 + f * wheel[k1][ch] / 255.0;
            let col = if rad <= 1.0 { 1.0 - rad * (1.0 - col) } else { col * 0.75 };
            rgb.push((255.0 * col).floor().clamp(0.0, 255.0) as u8);
        }
    }
    rgb
}

pub fn write_flow_ppm<W: Write>(out: &mut W, flow: &FlowField, max_radius: Option<f64>) -> Result<()> {
    write_ppm(out, flow.width(), flow.height(), &flow_to_rgb(flow, max_radius))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flo_round_trip_at_single_precision() {
        let f = FlowField::from_components(2, 3, vec![0.5, -1.0, 2.25, 0.0, 7.0, -3.5], vec![1.0; 6]).unwrap();
        let mut buf = Vec::new();
        write_flo(&mut buf, &f).unwrap();
        assert_eq!(&buf[..12], b"BFLO\x03\x00\x00\x00\x02\x00\x00\x00");
        assert_eq!(buf.len(), 12 + 48);
        assert_eq!(read_flo(&mut &buf[..]).unwrap(), f);
        buf[0] = b'X';
        assert!(read_flo(&mut &buf[..]).is_err());
    }

    #[test]
    fn wheel_has_55_hues_and_primary_anchors() {
        let w = color_wheel();
        assert_eq!(w.len(), 55);
        assert_eq!(w[0], [255.0, 0.0, 0.0]);
        assert_eq!(w[15], [255.0, 255.0, 0.0]);
        assert_eq!(w[21], [0.0, 255.0, 0.0]);
    }

    #[test]
    fn zero_flow_is_white_and_saturation_grows_with_magnitude() {
        let rgb = flow_to_rgb(&FlowField::zeros(1, 1), None);
        assert_eq!(rgb, vec![255, 255, 255]);
        // pointing right is pure red at full magnitude
        let f = FlowField::from_components(1, 2, vec![1.0, 0.5], vec![0.0, 0.0]).unwrap();
        let rgb = flow_to_rgb(&f, None);
        assert_eq!(&rgb[..3], &[255, 0, 0]);
        assert_eq!(&rgb[3..], &[255, 127, 127]);
    }
}
