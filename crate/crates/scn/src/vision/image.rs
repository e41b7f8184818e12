use crate::error::{Result, ScnError};

/// Grayscale raster with intensities in `[0, 1]`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct GrayImage {
    width: usize,
    height: usize,
    data: Vec<f64>,
}

impl GrayImage {
    pub fn new(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != width * height {
            return Err(ScnError::ShapeMismatch {
                op: "GrayImage::new",
                detail: format!(
                    "{}x{} image needs {} values, got {}",
                    width,
                    height,
                    width * height,
                    data.len()
                ),
            });
        }
        if let Some(pos) = data.iter().position(|v| !(0.0..=1.0).contains(v)) {
            return Err(ScnError::InvalidArgument {
                op: "GrayImage::new",
                detail: format!("intensity {} at index {} outside [0,1]", data[pos], pos),
            });
        }
        Ok(GrayImage {
            width,
            height,
            data,
        })
    }

    pub fn blank(width: usize, height: usize) -> Self {
        GrayImage {
            width,
            height,
            data: vec![0.0; width * height],
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: f64) {
        self.data[y * self.width + x] = v;
    }

    /// Foreground mask under a threshold: `intensity >= threshold`.
    pub fn mask(&self, threshold: f64) -> Vec<bool> {
        self.data.iter().map(|&v| v >= threshold).collect()
    }

    pub(crate) fn from_mask(width: usize, height: usize, mask: &[bool]) -> Self {
        GrayImage {
            width,
            height,
            data: mask.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect(),
        }
    }

    pub fn count_foreground(&self, threshold: f64) -> usize {
        self.data.iter().filter(|&&v| v >= threshold).count()
    }
}

/// RGB raster with channel values in `[0, 1]`, interleaved row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct ColorImage {
    width: usize,
    height: usize,
    data: Vec<f64>,
}

impl ColorImage {
    pub fn new(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != width * height * 3 {
            return Err(ScnError::ShapeMismatch {
                op: "ColorImage::new",
                detail: format!(
                    "{}x{} image needs {} values, got {}",
                    width,
                    height,
                    width * height * 3,
                    data.len()
                ),
            });
        }
        if let Some(pos) = data.iter().position(|v| !(0.0..=1.0).contains(v)) {
            return Err(ScnError::InvalidArgument {
                op: "ColorImage::new",
                detail: format!("channel value {} at index {} outside [0,1]", data[pos], pos),
            });
        }
        Ok(ColorImage {
            width,
            height,
            data,
        })
    }

    pub fn filled(width: usize, height: usize, rgb: [f64; 3]) -> Self {
        let mut data = Vec::with_capacity(width * height * 3);
        for _ in 0..width * height {
            data.extend_from_slice(&rgb);
        }
        ColorImage {
            width,
            height,
            data,
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> [f64; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, rgb: [f64; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i] = rgb[0];
        self.data[i + 1] = rgb[1];
        self.data[i + 2] = rgb[2];
    }

    /// Mean of the three channels.
    pub fn luminance(&self, x: usize, y: usize) -> f64 {
        let [r, g, b] = self.get(x, y);
        (r + g + b) / 3.0
    }

    pub fn to_gray(&self) -> GrayImage {
        let mut data = Vec::with_capacity(self.width * self.height);
        for px in self.data.chunks(3) {
            data.push((px[0] + px[1] + px[2]) / 3.0);
        }
        GrayImage {
            width: self.width,
            height: self.height,
            data,
        }
    }
}

/// RGB in [0,1] to (hue degrees [0,360), saturation [0,1], value [0,1]).
pub fn rgb_to_hsv(r: f64, g: f64, b: f64) -> (f64, f64, f64) {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let delta = max - min;
    let hue = if delta == 0.0 {
        0.0
    } else if max == r {
        60.0 * (((g - b) / delta).rem_euclid(6.0))
    } else if max == g {
        60.0 * ((b - r) / delta + 2.0)
    } else {
        60.0 * ((r - g) / delta + 4.0)
    };
    let sat = if max == 0.0 { 0.0 } else { delta / max };
    (hue.rem_euclid(360.0), sat, max)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gray_rejects_out_of_range() {
        assert!(GrayImage::new(2, 1, vec![0.0, 1.1]).is_err());
        assert!(GrayImage::new(2, 1, vec![0.0, 1.0]).is_ok());
    }

    #[test]
    fn hsv_primaries() {
        let (h, s, v) = rgb_to_hsv(1.0, 0.0, 0.0);
        assert_eq!((h, s, v), (0.0, 1.0, 1.0));
        let (h, _, _) = rgb_to_hsv(0.0, 1.0, 0.0);
        assert_eq!(h, 120.0);
        let (h, _, _) = rgb_to_hsv(0.0, 0.0, 1.0);
        assert_eq!(h, 240.0);
        let (_, s, v) = rgb_to_hsv(1.0, 1.0, 1.0);
        assert_eq!((s, v), (0.0, 1.0));
    }
}
