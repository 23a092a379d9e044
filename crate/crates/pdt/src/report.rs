//! Text formats: the per-step loss log and the metric report.
//!
//! Loss log: one JSON object per line,
//! `{"epoch":1,"step":3,"loss_rf":0.69,"loss_da":0.70,"loss_c":-0.69,"lr":0.0002}`
//! with `null` for discriminators that do not train in the mode.
//!
//! Metric report:
//!
//! ```text
//! # pdt metric report
//! mode C_RF_DD
//! split test
//! ssim window=11 sigma=1.5 k1=0.01 k2=0.03 range=1
//! image p0012 0 rmse=0.231337 ssim=0.402114
//! ...
//! count 31
//! mean_rmse 0.214022
//! mean_ssim 0.433051
//! retrieval correct=9 total=31 accuracy=0.290323 chance=0.005000 gallery=200
//! ```
//!
//! The `retrieval` line is present only when requested.

use std::fmt::Write;

use serde_json::json;

use pdt_core::metrics::{self, MetricReport, RetrievalReport};
use pdt_core::training::LossReport;

pub fn loss_line(r: &LossReport) -> String {
    json!({
        "epoch": r.epoch,
        "step": r.step,
        "loss_rf": r.loss_rf,
        "loss_da": r.loss_da,
        "loss_c": r.loss_c,
        "lr": r.lr,
    })
    .to_string()
}

pub fn metric_report(report: &MetricReport, retrieval: Option<&RetrievalReport>) -> String {
    let mut s = String::new();
    writeln!(s, "# pdt metric report").unwrap();
    writeln!(s, "mode {}", report.mode).unwrap();
    writeln!(s, "split {}", report.split).unwrap();
    writeln!(
        s,
        "ssim window={} sigma={} k1={} k2={} range={}",
        metrics::SSIM_WINDOW,
        metrics::SSIM_SIGMA,
        metrics::SSIM_K1,
        metrics::SSIM_K2,
        metrics::SSIM_RANGE
    )
    .unwrap();
    for m in &report.images {
        writeln!(s, "image {} {} rmse={:.6} ssim={:.6}", m.product, m.source, m.rmse, m.ssim).unwrap();
    }
    writeln!(s, "count {}", report.count()).unwrap();
    writeln!(s, "mean_rmse {:.6}", report.mean_rmse()).unwrap();
    writeln!(s, "mean_ssim {:.6}", report.mean_ssim()).unwrap();
    if let Some(r) = retrieval {
        writeln!(
            s,
            "retrieval correct={} total={} accuracy={:.6} chance={:.6} gallery={}",
            r.correct,
            r.total,
            r.accuracy(),
            r.chance(),
            r.gallery
        )
        .unwrap();
    }
    s
}

/// `mean_rmse` of a report produced by [`metric_report`].
pub fn parse_mean_rmse(text: &str) -> Option<f64> {
    text.lines().find_map(|l| l.strip_prefix("mean_rmse ")).and_then(|v| v.parse().ok())
}

#[cfg(test)]
mod tests {
    use super::*;
    use pdt_core::data::Split;
    use pdt_core::metrics::ImageMetric;

    #[test]
    fn loss_line_uses_null_for_idle_networks() {
        let r = LossReport {
            epoch: 2,
            step: 7,
            loss_rf: None,
            loss_da: None,
            loss_c: 0.5,
            lr: 2e-4,
        };
        let v: serde_json::Value = serde_json::from_str(&loss_line(&r)).unwrap();
        assert!(v["loss_rf"].is_null());
        assert_eq!(v["step"], 7);
        assert_eq!(v["lr"], 2e-4);
    }

    #[test]
    fn report_layout() {
        let r = MetricReport {
            mode: "C_MSE".into(),
            split: Split::Test,
            images: vec![ImageMetric {
                product: "p1".into(),
                source: 0,
                rmse: 0.0,
                ssim: 1.0,
            }],
        };
        let text = metric_report(&r, None);
        assert!(text.contains("image p1 0 rmse=0.000000 ssim=1.000000\n"));
        assert_eq!(parse_mean_rmse(&text), Some(0.0));
        assert!(!text.contains("retrieval"));
    }
}
