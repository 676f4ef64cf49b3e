import numpy as np, time, json
from tvseg.synth import generate_cells, add_gaussian_noise, add_salt_pepper
from tvseg.net import NetSpec, build, train, predict, forward
from tvseg.activations import RegActConfig, post_tv
from tvseg.metrics import confusion_matrix, miou_from_confusion, accuracy_from_confusion, regularization_effect

EPOCHS = 30
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

def sweep_model(predfn):
    rows = {}
    for kind, level in GRID:
        conf = np.zeros((3, 3), dtype=np.int64); res = []
        for i, s in enumerate(te):
            lab = predfn(noisy(s.image, kind, level, i))
            conf += confusion_matrix(lab, s.label, 3)
            res.append(regularization_effect(lab))
        rows[f'{kind}:{level}'] = (round(miou_from_confusion(conf), 2),
                                   round(accuracy_from_confusion(conf), 2),
                                   round(float(np.mean(res)), 3))
    return rows

results = {}
for seed in (0, 1, 2):
    t0 = time.time()
    net_p = build(NetSpec(activation='plain'), seed=seed); net_p.params.lr = 0.02
    train(net_p, tr, epochs=EPOCHS, batch_size=6, seed=seed)
    spec_r = NetSpec(activation='regularized',
                     reg=RegActConfig(lam=0.5, kappa=0.25, tau=0.125,
                                      iterations=100, mode='one_step'))
    net_r = build(spec_r, seed=seed); net_r.params.lr = 0.02
    logr = train(net_r, tr, epochs=EPOCHS, batch_size=6, seed=seed, tau_lambda=0.1)
    t1 = time.time()

    results[f'plain_{seed}'] = sweep_model(
        lambda img: predict(net_p, img, 100)[1])
    results[f'reg_{seed}'] = sweep_model(
        lambda img: predict(net_r, img, 100)[1])
    for lam_post in (0.5, 1.0):
        def ptv(img, lam_post=lam_post):
            logits, _, _ = forward(net_p, img)
            return np.argmax(post_tv(logits, lam_post, 100), axis=0)
        results[f'ptv{lam_post}_{seed}'] = sweep_model(ptv)
    results[f'meta_{seed}'] = {'lam_final': net_r.lam,
                               'train_s': round(t1 - t0, 1)}
    print(f'seed {seed} done ({time.time()-t0:.0f}s)', flush=True)

with open('/root/pkg/.devtmp/compare30.json', 'w') as fh:
    json.dump(results, fh, indent=1)
print('ALL DONE')
