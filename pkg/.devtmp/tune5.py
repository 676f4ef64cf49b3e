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
EP = 45
net_p = build(NetSpec(activation='plain'), seed=0); net_p.params.lr = 0.02
t0 = time.time()
logp = train(net_p, tr, epochs=EP, batch_size=6, seed=0)
out['plain'] = sweep(net_p)
out['loss_plain_tail'] = [round(v, 4) for v in logp.losses[-12:]]
print(f"plain ep{EP} done ({time.time()-t0:.0f}s): {out['plain']}", flush=True)

t0 = time.time()
spec = NetSpec(activation='regularized',
               reg=RegActConfig(lam=0.5, kappa=0.25, tau=0.125,
                                iterations=100, mode='one_step'))
net = build(spec, seed=0); net.params.lr = 0.02
log = train(net, tr, epochs=EP, batch_size=6, seed=0, tau_lambda=1.5)
out['reg'] = sweep(net)
out['lam'] = [round(v, 4) for v in log.lambda_per_epoch]
# criterion-7 moving-average monotonicity probe
losses = np.array(log.losses)
ma = np.convolve(losses, np.ones(20) / 20, mode='valid')
out['ma_monotone'] = bool(np.all(np.diff(ma) <= 1e-12))
out['ma_worst_up'] = float(np.diff(ma).max())
print(f"reg ep{EP}: lam={net.lam:.3f} ma_mono={out['ma_monotone']} "
      f"worst_up={out['ma_worst_up']:.2e} ({time.time()-t0:.0f}s)", flush=True)
print(out['reg'], flush=True)
with open('/root/pkg/.devtmp/tune5.json', 'w') as fh:
    json.dump(out, fh, indent=1)
print('DONE')
