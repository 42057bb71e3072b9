//! Segmentation and saliency metrics on hand-made predictions.

use fusewright::tasks::{metric_fbeta, metric_mae, metric_miou, FBETA_SQ};

fn main() {
    let gt = [0u8, 0, 1, 1, 2, 2, 3, 3];
    let pred = [0u8, 1, 1, 1, 2, 2, 3, 0];
    println!("mIoU perfect {:.3}, noisy {:.3}", metric_miou(&gt, &gt, 4), metric_miou(&pred, &gt, 4));

    let mask = [0u8, 0, 1, 1];
    let prob = [0.1, 0.4, 0.8, 0.6];
    println!("MAE {:.3}, F-beta {:.3}", metric_mae(&prob, &mask), metric_fbeta(&prob, &mask, FBETA_SQ));
}
