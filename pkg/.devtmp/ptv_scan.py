import numpy as np, time, json
from tvseg.synth import generate_cells, add_gaussian_noise, add_salt_pepper
from tvseg.net import NetSpec, build, train, forward
from tvseg.activations import post_tv
from tvseg.metrics import confusion_matrix, miou_from_confusion, regularization_effect

samples = generate_cells(100, 64, seed=11)
tr, te = samples[:60], samples[60:]
GRID = [('clean', 0.0), ('gaussian', 0.01), ('gaussian', 0.03), ('gaussian', 0.05),
        ('gaussian', 0.07), ('gaussian', 0.09), ('pepper', 0.01), ('salt', 0.01)]

def noisy(img, kind, level, i):
    if kind == 'gaussian':
        return add_gaussian_noise(img, level, seed=1000 + i)
    if kind in ('pepper', 'salt'):
        return add_salt_pepper(img, level, kind, seed=1000 + i)
    return img

out = {}
for seed in (0, 1, 2):
    t0 = time.time()
    net_p = build(NetSpec(activation='plain'), seed=seed); net_p.params.lr = 0.02
    train(net_p, tr, epochs=45, batch_size=6, seed=seed)
    logits_cache = {}
    for lam_post in (0.3, 0.5):
        rows = {}
        for kind, level in GRID:
            conf = np.zeros((3, 3), dtype=np.int64); res = []
            for i, s in enumerate(te):
                key = (kind, level, i)
                if key not in logits_cache:
                    lg, _, _ = forward(net_p, noisy(s.image, kind, level, i))
                    logits_cache[key] = lg
                lab = np.argmax(post_tv(logits_cache[key], lam_post, 100), axis=0)
                conf += confusion_matrix(lab, s.label, 3)
                res.append(regularization_effect(lab))
            rows[f'{kind}:{level}'] = (round(miou_from_confusion(conf), 2),
                                       round(float(np.mean(res)), 3))
        out[f'ptv{lam_post}_{seed}'] = rows
    print(f'seed {seed} done ({time.time()-t0:.0f}s)', flush=True)
json.dump(out, open('/root/pkg/.devtmp/ptv_scan.json', 'w'), indent=1)
print('DONE')
