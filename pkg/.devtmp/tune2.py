import numpy as np, time, json
from tvseg.synth import generate_cells, add_gaussian_noise, add_salt_pepper
from tvseg.net import NetSpec, build, train, predict
from tvseg.activations import RegActConfig
from tvseg.metrics import confusion_matrix, miou_from_confusion, regularization_effect

samples = generate_cells(100, 64, seed=11)
tr, te = samples[:60], samples[60:]
GRID = [('clean', 0.0), ('gaussian', 0.05), ('gaussian', 0.07),
        ('gaussian', 0.09), ('pepper', 0.01), ('salt', 0.01)]

def sweep(net):
    rows = {}
    for kind, level in GRID:
        conf = np.zeros((3, 3), dtype=np.int64); res = []
        for i, s in enumerate(te):
            img = s.image
            if kind == 'gaussian':
                img = add_gaussian_noise(img, level, seed=1000 + i)
            elif kind in ('pepper', 'salt'):
                img = add_salt_pepper(img, level, kind, seed=1000 + i)
            _, lab = predict(net, img, 100)
            conf += confusion_matrix(lab, s.label, 3)
            res.append(regularization_effect(lab))
        rows[f'{kind}:{level}'] = (round(miou_from_confusion(conf), 2),
                                   round(float(np.mean(res)), 3))
    return rows

out = {}
for tau_lam in (1.5, 3.0):
    t0 = time.time()
    spec = NetSpec(activation='regularized',
                   reg=RegActConfig(lam=0.5, kappa=0.25, tau=0.125,
                                    iterations=100, mode='one_step'))
    net = build(spec, seed=0); net.params.lr = 0.02
    log = train(net, tr, epochs=30, batch_size=6, seed=0, tau_lambda=tau_lam)
    out[f'reg_tl{tau_lam}'] = sweep(net)
    out[f'lam_tl{tau_lam}'] = [round(v, 4) for v in log.lambda_per_epoch]
    print(f'tau_lam={tau_lam}: lam_epochs {out[f"lam_tl{tau_lam}"][::4]} final={net.lam:.3f} ({time.time()-t0:.0f}s)', flush=True)
with open('/root/pkg/.devtmp/tune2.json', 'w') as fh:
    json.dump(out, fh, indent=1)
print('DONE')
