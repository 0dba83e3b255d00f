use std::path::Path;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Reads a 16-bit single-channel PNG of millimeter depths into meters.
/// Zero stays zero and means "no measurement".
pub fn read_depth<T: Scalar>(path: &Path, width: u32, height: u32) -> Result<Vec<T>> {
    let img = image::open(path).map_err(|e| Error::load(path, &e.to_string()))?;
    let img = match img {
        image::DynamicImage::ImageLuma16(buf) => buf,
        _ => {
            return Err(Error::schema(format!(
                "{}: depth must be 16-bit single-channel",
                path.display()
            )))
        }
    };
    if img.width() != width || img.height() != height {
        return Err(Error::schema(format!(
            "{}: depth size {}x{} does not match manifest {}x{}",
            path.display(),
            img.width(),
            img.height(),
            width,
            height
        )));
    }
    let scale = T::from_f64_cfg(0.001);
    Ok(img
        .pixels()
        .map(|p| T::from_u16(p.0[0]).unwrap() * scale)
        .collect())
}

/// Writes meters as 16-bit millimeter PNG. Non-finite and non-positive
/// depths become 0; values beyond the u16 range saturate.
pub fn write_depth<T: Scalar>(path: &Path, depth: &[T], width: u32, height: u32) -> Result<()> {
    debug_assert_eq!(depth.len(), (width * height) as usize);
    let mut buf = image::ImageBuffer::<image::Luma<u16>, Vec<u16>>::new(width, height);
    for (i, px) in buf.pixels_mut().enumerate() {
        let d = depth[i];
        let mm = if d.is_finite() && d > T::zero() {
            let v = (d * T::from_f64_cfg(1000.0)).round().to_f64_out();
            v.clamp(0.0, 65535.0) as u16
        } else {
            0
        };
        *px = image::Luma([mm]);
    }
    buf.save(path).map_err(|e| Error::load(path, &e.to_string()))?;
    Ok(())
}

/// Quantizes a depth value the way a write/read cycle would, so generated
/// scenes can hold depths that survive the format exactly.
pub fn quantize_depth<T: Scalar>(d: T) -> T {
    if !(d.is_finite() && d > T::zero()) {
        return T::zero();
    }
    let mm = (d * T::from_f64_cfg(1000.0)).round().to_f64_out().clamp(0.0, 65535.0);
    T::from_f64_cfg(mm * 0.001)
}
