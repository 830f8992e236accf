//! Full-reference quality metrics and batch evaluation.

mod metrics;
mod report;

pub use metrics::{
    mask_iou, mask_iou_at, mse, psnr, psnr_capped, ssim, ssim_window, ImageMetric, Psnr, Ssim, PSNR_CAP, SSIM_K1,
    SSIM_K2, SSIM_SIGMA, SSIM_WINDOW,
};
pub use report::{evaluate, EvalItem, IdentityRestorer, ImageMetrics, MetricReport, Restorer, Summary};
