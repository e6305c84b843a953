//! Model checkpoint file: a one-line JSON header describing dimensions and
//! training metadata, followed by the parameter matrices as consecutive CGM1
//! binary blocks in declared order (calibrator W1, b1, W2, b2, then detector
//! layer 1 W1, b1, W2, b2, layer 2 likewise, projection).

use crate::error::{AppError, Result};
use crate::formats::{read_matrix_bin, write_matrix_bin};
use advcali_core::models::{GcnTemperatureScaler, GinGroupDetector, GinLayer};
use advcali_core::tensor::Tensor;
use serde::{Deserialize, Serialize};
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

#[derive(Debug, Serialize, Deserialize, PartialEq)]
pub struct CheckpointHeader {
    pub method: String,
    pub seed: u64,
    pub t_min: f64,
    pub num_classes: usize,
    pub hidden_calibrator: usize,
    pub hidden_detector: usize,
    pub num_groups: usize,
    pub has_detector: bool,
}

pub fn save_checkpoint(
    path: &Path,
    header: &CheckpointHeader,
    calibrator: &GcnTemperatureScaler,
    detector: Option<&GinGroupDetector>,
) -> Result<()> {
    let file = File::create(path).map_err(|e| AppError::Io(format!("{}: {e}", path.display())))?;
    let mut out = BufWriter::new(file);
    let json = serde_json::to_string(header)?;
    out.write_all(json.as_bytes())?;
    out.write_all(b"\n")?;
    for t in calibrator.params() {
        write_matrix_bin(&mut out, t)?;
    }
    if let Some(det) = detector {
        for t in det.params() {
            write_matrix_bin(&mut out, t)?;
        }
    }
    out.flush()?;
    Ok(())
}

pub fn load_checkpoint(
    path: &Path,
) -> Result<(CheckpointHeader, GcnTemperatureScaler, Option<GinGroupDetector>)> {
    let file = File::open(path).map_err(|e| AppError::Io(format!("{}: {e}", path.display())))?;
    let mut input = BufReader::new(file);
    let mut header_line = Vec::new();
    let mut byte = [0u8; 1];
    loop {
        input
            .read_exact(&mut byte)
            .map_err(|e| AppError::Parse(format!("{}: header: {e}", path.display())))?;
        if byte[0] == b'\n' {
            break;
        }
        header_line.push(byte[0]);
    }
    let header: CheckpointHeader = serde_json::from_slice(&header_line)
        .map_err(|e| AppError::Parse(format!("{}: header: {e}", path.display())))?;

    let mut next = || -> Result<Tensor> { read_matrix_bin(&mut input) };
    let calibrator = GcnTemperatureScaler {
        w1: next()?,
        b1: next()?,
        w2: next()?,
        b2: next()?,
        t_min: header.t_min,
    };
    let detector = if header.has_detector {
        let mut layer = || -> Result<GinLayer> {
            Ok(GinLayer {
                w1: next()?,
                b1: next()?,
                w2: next()?,
                b2: next()?,
            })
        };
        Some(GinGroupDetector {
            layer1: layer()?,
            layer2: layer()?,
            proj: next()?,
        })
    } else {
        None
    };
    Ok((header, calibrator, detector))
}
