// SPDX-License-Identifier: Apache-2.0

//! The shipped QR-code payment demo.
//!
//! ```text
//! ae1 (camera) --dma--> ae2 (parser) --crypto--> ce --> se
//!                           |
//!                           +--dma--> ae3 (uplink) --> cloud
//! ```
//!
//! The files live in `scenarios/qr_payment/`; they are compiled in so the
//! demo runs without a checkout.

use super::config::ScenarioConfig;

macro_rules! shipped {
    ($($name:literal),* $(,)?) => {
        &[$(($name, include_bytes!(concat!("../../../../scenarios/qr_payment/", $name)) as &[u8])),*]
    };
}

const FILES: &[(&str, &[u8])] = shipped![
    "ae1_camera.asm",
    "ae2_parser.asm",
    "ae3_uplink.asm",
    "epa.bin",
    "ce.bin",
    "re.bin",
    "qr_payment.measurements",
];

const CONFIG: &str = include_str!("../../../../scenarios/qr_payment/qr_payment.json");

/// Text of the golden measurements file.
pub const QR_MEASUREMENTS: &str = include_str!("../../../../scenarios/qr_payment/qr_payment.measurements");

pub fn qr_payment_scenario() -> ScenarioConfig {
    ScenarioConfig::from_json(CONFIG, |name| {
        FILES
            .iter()
            .find(|(n, _)| *n == name)
            .map(|(_, bytes)| bytes.to_vec())
            .ok_or_else(|| format!("{name}: not part of the shipped scenario"))
    })
    .expect("shipped scenario is valid")
}
