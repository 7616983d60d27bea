// Diagnostic: linear probes over frozen random ViT tokens.
// (a) plain mean of projected patch tokens, (b) pose-guided weighted mean.
use clip_mg::model::{ClipMgModel, Variant};
use clip_mg::numeric::{ops, Tape};
use clip_mg::pose::{patch_relevance, sample_pose_frames, temporal_windows};
use clip_mg::synth::{generate_clip, SynthConfig};
use clip_mg::visual::{prefix_tokens, project_tokens, suffix_forward};

fn features(model: &ClipMgModel, synth: &SynthConfig, n: usize) -> (Vec<Vec<f64>>, Vec<Vec<f64>>, Vec<usize>) {
    let cfg = &model.cfg;
    let p = cfg.vit.patches();
    let mut mean_feats = Vec::new();
    let mut guided_feats = Vec::new();
    let mut labels = Vec::new();
    for i in 0..n {
        let clip = generate_clip(synth, i).unwrap();
        let input = clip.to_input(synth.canvas, synth.channels);
        let sampled = clip_mg::visual::sample_rgb_frames(&input.frames).unwrap();
        let tape = Tape::no_grad();
        let bound = model.store.bind(&tape).unwrap();
        let mut rows = Vec::new();
        for f in &sampled {
            let prefix = prefix_tokens(&model.store, &model.vit, &cfg.vit, f).unwrap();
            let toks = suffix_forward(&tape, &bound, &model.vit, &cfg.vit, &prefix).unwrap();
            rows.push(ops::slice_rows(toks.final_tokens, 1, p).unwrap());
        }
        let all = ops::concat_rows(&rows).unwrap();
        let proj = project_tokens(all, bound.var(model.vit.proj)).unwrap();
        let mean = ops::col_mean(proj).unwrap().data();
        // pose-guided weights
        let pose32 = sample_pose_frames(&input.pose).unwrap();
        let windows = temporal_windows(&pose32).unwrap();
        let w = patch_relevance(&windows, &cfg.vit.patch_centers(), cfg.sigma_rel, false).unwrap();
        let total: f64 = w.iter().sum();
        let pd = proj.data();
        let d = cfg.d();
        let mut guided = vec![0.0; d];
        for (i, wi) in w.iter().enumerate() {
            for j in 0..d { guided[j] += wi * pd[i * d + j]; }
        }
        for g in &mut guided { *g /= total; }
        mean_feats.push(mean);
        guided_feats.push(guided);
        labels.push(clip.label as usize);
    }
    (mean_feats, guided_feats, labels)
}

fn probe(train_x: &[Vec<f64>], train_y: &[usize], test_x: &[Vec<f64>], test_y: &[usize], classes: usize) -> f64 {
    let d = train_x[0].len();
    // Standardize features.
    let n = train_x.len() as f64;
    let mut mu = vec![0.0; d];
    let mut sd = vec![0.0; d];
    for x in train_x { for j in 0..d { mu[j] += x[j] / n; } }
    for x in train_x { for j in 0..d { sd[j] += (x[j]-mu[j]).powi(2) / n; } }
    for s in &mut sd { *s = s.sqrt().max(1e-8); }
    let norm = |x: &Vec<f64>| -> Vec<f64> { (0..d).map(|j| (x[j]-mu[j])/sd[j]).collect() };
    let tx: Vec<Vec<f64>> = train_x.iter().map(norm).collect();
    let vx: Vec<Vec<f64>> = test_x.iter().map(norm).collect();
    let flat: Vec<f64> = tx.iter().flatten().copied().collect();
    let mut w = vec![0.0; classes * d];
    let mut b = vec![0.0; classes];
    let (mut mw, mut vw) = (vec![0.0; classes*d], vec![0.0; classes*d]);
    let (mut mb, mut vb) = (vec![0.0; classes], vec![0.0; classes]);
    for step in 1..=400 {
        let tape = Tape::new();
        let x = tape.constant(flat.clone(), vec![tx.len(), d]).unwrap();
        let wv = tape.leaf(w.clone(), vec![d, classes]).unwrap();
        let bv = tape.leaf(b.clone(), vec![classes]).unwrap();
        let logits = ops::add_bias(ops::matmul(x, wv).unwrap(), bv).unwrap();
        let probs = ops::softmax(logits).unwrap();
        let loss = ops::nll_loss(probs, train_y).unwrap();
        let g = tape.backward(loss).unwrap();
        let gw = g.of(wv).unwrap().to_vec();
        let gb = g.of(bv).unwrap().to_vec();
        let lr = 0.1_f64; let b1 = 0.9_f64; let b2 = 0.999_f64;
        let c1 = 1.0 - b1.powi(step as i32); let c2 = 1.0 - b2.powi(step as i32);
        for i in 0..w.len() { mw[i]=b1*mw[i]+(1.0-b1)*gw[i]; vw[i]=b2*vw[i]+(1.0-b2)*gw[i]*gw[i]; w[i]-=lr*(mw[i]/c1)/((vw[i]/c2).sqrt()+1e-8); }
        for i in 0..b.len() { mb[i]=b1*mb[i]+(1.0-b1)*gb[i]; vb[i]=b2*vb[i]+(1.0-b2)*gb[i]*gb[i]; b[i]-=lr*(mb[i]/c1)/((vb[i]/c2).sqrt()+1e-8); }
    }
    let mut correct = 0;
    for (x, &y) in vx.iter().zip(test_y) {
        let mut best = 0; let mut bestv = f64::NEG_INFINITY;
        for c in 0..classes {
            let mut s = b[c];
            for j in 0..d { s += x[j]*w[j*classes+c]; }
            if s > bestv { bestv = s; best = c; }
        }
        correct += (best == y) as usize;
    }
    100.0 * correct as f64 / vx.len() as f64
}

fn raw_features(synth: &SynthConfig, n: usize, sigma_rel: f64, grid: usize) -> (Vec<Vec<f64>>, Vec<Vec<f64>>, Vec<usize>) {
    // Per-patch raw channel means, then plain vs pose-guided pooling.
    let patch = synth.canvas / grid;
    let centers = clip_mg::pose::patch_center_grid(grid);
    let mut mean_feats = Vec::new();
    let mut guided_feats = Vec::new();
    let mut labels = Vec::new();
    for i in 0..n {
        let clip = generate_clip(synth, i).unwrap();
        let input = clip.to_input(synth.canvas, synth.channels);
        let sampled = clip_mg::visual::sample_rgb_frames(&input.frames).unwrap();
        // patch color means per frame: [8 * P] x 3
        let mut tokens: Vec<[f64; 3]> = Vec::new();
        for f in &sampled {
            for pr in 0..grid { for pc in 0..grid {
                let mut acc = [0.0; 3];
                for y in 0..patch { for x in 0..patch {
                    let base = (((pr*patch+y) * synth.canvas) + pc*patch + x) * 3;
                    for ch in 0..3 { acc[ch] += f[base+ch]; }
                }}
                for a in &mut acc { *a /= (patch*patch) as f64; }
                tokens.push(acc);
            }}
        }
        let pose32 = sample_pose_frames(&input.pose).unwrap();
        let windows = temporal_windows(&pose32).unwrap();
        let w = patch_relevance(&windows, &centers, sigma_rel, false).unwrap();
        let total: f64 = w.iter().sum();
        let mut guided = vec![0.0; 3];
        let mut plain = vec![0.0; 3];
        for (t, tok) in tokens.iter().enumerate() {
            for ch in 0..3 {
                plain[ch] += tok[ch] / tokens.len() as f64;
                guided[ch] += w[t] * tok[ch] / total;
            }
        }
        mean_feats.push(plain);
        guided_feats.push(guided);
        labels.push(clip.label as usize);
    }
    (mean_feats, guided_feats, labels)
}

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let distractors: usize = args.get(1).map(|s| s.parse().unwrap()).unwrap_or(6);
    let contrast: f64 = args.get(2).map(|s| s.parse().unwrap()).unwrap_or(0.5);
    let n: usize = args.get(3).map(|s| s.parse().unwrap()).unwrap_or(420);
    let synth = SynthConfig { distractors, glyph_contrast: contrast, distractor_contrast: 0.5,
        train_size: n, test_size: 0, ..SynthConfig::default() };
    let exp = clip_mg::harness::ExperimentConfig { synth: synth.clone(), variant: Variant::Full, ..Default::default() };
    let model = ClipMgModel::new(exp.model_config(synth.classes), 99).unwrap();
    let (rmean, rguided, rlabels) = raw_features(&synth, n, 0.25, 4);
    let split = n * 4 / 5;
    let racc_mean = probe(&rmean[..split].to_vec(), &rlabels[..split], &rmean[split..].to_vec(), &rlabels[split..], synth.classes);
    let racc_guided = probe(&rguided[..split].to_vec(), &rlabels[..split], &rguided[split..].to_vec(), &rlabels[split..], synth.classes);
    println!("RAW   distractors={distractors} contrast={contrast}: mean-probe {racc_mean:.1}%  pose-guided-probe {racc_guided:.1}%");
    let (mean_f, guided_f, labels) = features(&model, &synth, n);
    let acc_mean = probe(&mean_f[..split].to_vec(), &labels[..split], &mean_f[split..].to_vec(), &labels[split..], synth.classes);
    let acc_guided = probe(&guided_f[..split].to_vec(), &labels[..split], &guided_f[split..].to_vec(), &labels[split..], synth.classes);
    println!("VIT   distractors={distractors} contrast={contrast}: mean-probe {acc_mean:.1}%  pose-guided-probe {acc_guided:.1}%");
}
