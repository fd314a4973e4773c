use super::EnsembleError;
use crate::scalar::Real;
use crate::tensor_nn::ImageShape;

/// Rotates a channel-last image about its center by `degrees`
/// (counter-clockwise), with bilinear interpolation and zero padding.
pub fn rotate<T: Real>(image: &[T], shape: ImageShape, degrees: f64) -> Result<Vec<T>, EnsembleError> {
    if shape.is_empty() || image.len() != shape.len() {
        return Err(EnsembleError::NotImageShaped {
            len: image.len(),
            shape: Some(shape),
        });
    }
    let (h, w, ch) = (shape.height, shape.width, shape.channels);
    let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    let (sin, cos) = degrees.to_radians().sin_cos();
    let pixel = |y: i64, x: i64, c: usize| -> f64 {
        if y < 0 || x < 0 || y >= h as i64 || x >= w as i64 {
            0.0
        } else {
            image[(y as usize * w + x as usize) * ch + c].as_f64()
        }
    };
    let mut out = vec![T::zero(); image.len()];
    for y in 0..h {
        for x in 0..w {
            // inverse map: where does this output pixel come from
            let (dy, dx) = (y as f64 - cy, x as f64 - cx);
            let sy = sin * dx + cos * dy + cy;
            let sx = cos * dx - sin * dy + cx;
            let (y0, x0) = (sy.floor(), sx.floor());
            let (fy, fx) = (sy - y0, sx - x0);
            let (y0, x0) = (y0 as i64, x0 as i64);
            for c in 0..ch {
                let v = (1.0 - fy) * (1.0 - fx) * pixel(y0, x0, c)
                    + (1.0 - fy) * fx * pixel(y0, x0 + 1, c)
                    + fy * (1.0 - fx) * pixel(y0 + 1, x0, c)
                    + fy * fx * pixel(y0 + 1, x0 + 1, c);
                out[(y * w + x) * ch + c] = T::of(v);
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn shape(h: usize, w: usize, c: usize) -> ImageShape {
        ImageShape {
            height: h,
            width: w,
            channels: c,
        }
    }

    #[test]
    fn zero_degrees_is_identity() {
        let img: Vec<f64> = (0..5 * 4 * 2).map(|v| v as f64 * 0.37 - 3.0).collect();
        let out = rotate(&img, shape(5, 4, 2), 0.0).unwrap();
        for (a, b) in img.iter().zip(&out) {
            assert!((a - b).abs() <= 1e-9);
        }
    }

    #[test]
    fn quarter_turn_moves_pixels() {
        // 3x3 with a single lit pixel at the top middle
        let mut img = vec![0.0f64; 9];
        img[1] = 1.0;
        let out = rotate(&img, shape(3, 3, 1), 90.0).unwrap();
        // counter-clockwise: top middle goes to left middle
        assert!((out[3] - 1.0).abs() < 1e-9, "{out:?}");
        assert!((out.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn corners_fall_off_with_zero_padding() {
        let img = vec![1.0f32; 16];
        let out = rotate(&img, shape(4, 4, 1), 45.0).unwrap();
        assert!(out[0] < 1.0);
        assert!((out[5] - 1.0).abs() < 1e-6);
    }

    #[test]
    fn rejects_wrong_length() {
        assert!(matches!(
            rotate(&[0.0f64; 5], shape(2, 2, 1), 3.0),
            Err(EnsembleError::NotImageShaped { .. })
        ));
    }
}
