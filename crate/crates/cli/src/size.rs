use serde::{Deserialize, Serialize};

/// Parameter count (thousands) and storage (KiB) of a vanilla RNN. Quantized
/// models store `W` and `U` with `k` bits per entry and the readout as
/// 32-bit floats. The modReLU bias is not counted.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSize {
    pub kparams: f64,
    pub kbytes: f64,
    pub bits: Option<u32>,
}

pub fn model_size(n_i: usize, n_h: usize, n_o: usize, bits: Option<u32>) -> ModelSize {
    let quantizable = (n_h * n_h + n_h * n_i) as f64;
    let readout = (n_o * n_h + n_o) as f64;
    let bytes = match bits {
        Some(k) => quantizable * f64::from(k) / 8.0 + 4.0 * readout,
        None => 4.0 * (quantizable + readout),
    };
    ModelSize {
        kparams: (quantizable + readout) / 1000.0,
        kbytes: bytes / 1024.0,
        bits,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn copy_model_sizes() {
        let fp = model_size(10, 256, 9, None);
        assert_eq!(format!("{:.1}", fp.kparams), "70.4");
        assert_eq!(format!("{:.0}", fp.kbytes), "275");
        let q = model_size(10, 256, 9, Some(5));
        assert_eq!(format!("{:.1}", q.kbytes), "50.6");
        // Hand count: (65536 + 2560)·5/8 + 4·(2304 + 9) bytes.
        assert_eq!(q.kbytes * 1024.0, 42_560.0 + 9_252.0);
    }
}
