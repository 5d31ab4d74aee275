use crate::tensor::{Real, Tape, Var};
use crate::{Error, Result};

/// Smoothing added to both numerator and denominator of the soft Dice.
pub const DICE_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug)]
pub struct DiceCeTerms {
    /// `0.5 * (dice + ce)`.
    pub total: Var,
    pub dice: Var,
    pub ce: Var,
}

/// Soft Dice over the foreground classes plus class-weighted cross-entropy,
/// averaged with equal weight.
///
/// `logits` is `[voxels, classes]`; class 0 is background and only enters
/// the cross-entropy term.
pub fn dice_ce_loss<E: Real>(tape: &mut Tape<E>, logits: Var, labels: &[u8], class_weights: &[f64]) -> Result<DiceCeTerms> {
    let (v, c) = match tape.shape(logits) {
        [v, c] => (*v, *c),
        s => return Err(Error::shape("dice_ce_loss", format!("logits must be [voxels, classes], got {s:?}"))),
    };
    if labels.len() != v {
        return Err(Error::shape("dice_ce_loss", format!("{} labels for {v} voxels", labels.len())));
    }
    if class_weights.len() != c || c < 2 {
        return Err(Error::shape("dice_ce_loss", format!("{} class weights for {c} classes", class_weights.len())));
    }
    if class_weights.iter().any(|w| !(*w >= 0.0) || !w.is_finite()) {
        return Err(Error::invalid("class weights must be finite and non-negative"));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l as usize >= c) {
        return Err(Error::invalid(format!("label {bad} outside 0..{c}")));
    }

    let mut onehot = vec![E::ZERO; v * c];
    let mut ce_w = vec![E::ZERO; v * c];
    let mut gsum = vec![E::ZERO; c];
    let wsum: f64 = labels.iter().map(|&l| class_weights[l as usize]).sum();
    if !(wsum > 0.0) {
        return Err(Error::invalid("class weights give zero total weight on these labels"));
    }
    for (i, &l) in labels.iter().enumerate() {
        let l = l as usize;
        onehot[i * c + l] = E::ONE;
        ce_w[i * c + l] = E::from_f64(-class_weights[l] / wsum);
        gsum[l] += E::ONE;
    }

    let logp = tape.log_softmax(logits, 1)?;
    let ce_w = tape.constant_from([v, c], ce_w)?;
    let ce = tape.mul(logp, ce_w)?;
    let ce = tape.sum(ce)?;

    let probs = tape.softmax(logits, 1)?;
    let g = tape.constant_from([v, c], onehot)?;
    let inter = tape.mul(probs, g)?;
    let inter = tape.sum_rows(inter)?;
    let psum = tape.sum_rows(probs)?;
    let eps = E::from_f64(DICE_EPS);
    let num = tape.scale(inter, E::from_f64(2.0))?;
    let num = tape.offset(num, eps)?;
    let gsum = tape.constant_from([c], gsum)?;
    let den = tape.add(psum, gsum)?;
    let den = tape.offset(den, eps)?;
    let dice_c = tape.div(num, den)?;

    let fg_total: f64 = class_weights[1..].iter().sum();
    let mut fg_w = vec![E::ZERO; c];
    for k in 1..c {
        let w = if fg_total > 0.0 { class_weights[k] / fg_total } else { 1.0 / (c - 1) as f64 };
        fg_w[k] = E::from_f64(-w);
    }
    let fg_w = tape.constant_from([c], fg_w)?;
    let dice = tape.mul(dice_c, fg_w)?;
    let dice = tape.sum(dice)?;
    let dice = tape.offset(dice, E::ONE)?;

    let total = tape.add(dice, ce)?;
    let total = tape.scale(total, E::from_f64(0.5))?;
    Ok(DiceCeTerms { total, dice, ce })
}

/// Hard Dice for one class: `2|P∩G| / (|P| + |G|)`, 1 when both are empty.
pub fn dice_score(pred: &[u8], gt: &[u8], class: u8) -> f64 {
    assert_eq!(pred.len(), gt.len(), "dice_score needs equal-length grids");
    let (mut p, mut g, mut both) = (0usize, 0usize, 0usize);
    for (&a, &b) in pred.iter().zip(gt) {
        let (pa, gb) = (a == class, b == class);
        p += pa as usize;
        g += gb as usize;
        both += (pa && gb) as usize;
    }
    if p + g == 0 {
        1.0
    } else {
        2.0 * both as f64 / (p + g) as f64
    }
}

/// Per-voxel argmax over `[voxels, classes]` probabilities.
pub fn argmax_labels<E: Real>(probs: &[E], classes: usize) -> Vec<u8> {
    probs
        .chunks_exact(classes)
        .map(|row| {
            let mut best = 0;
            for k in 1..classes {
                if row[k] > row[best] {
                    best = k;
                }
            }
            best as u8
        })
        .collect()
}
