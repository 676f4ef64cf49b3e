import numpy as np, json
from tvseg.synth import generate_cells
from tvseg.net import NetSpec, build, train
from tvseg.activations import RegActConfig

samples = generate_cells(100, 64, seed=11)
tr = samples[:60]
spec = NetSpec(activation='regularized',
               reg=RegActConfig(lam=0.5, kappa=0.25, tau=0.125,
                                iterations=100, mode='one_step'))
net = build(spec, seed=0); net.params.lr = 0.02
log = train(net, tr, epochs=45, batch_size=6, seed=0, tau_lambda=1.5)
losses = np.array(log.losses)
ma = np.convolve(losses, np.ones(20) / 20, mode='valid')
ups = np.where(np.diff(ma) > 1e-12)[0]
print('iterations:', len(losses))
print('up-tick positions (ma index):', ups[:40])
print('worst up:', float(np.diff(ma).max()), 'at', int(np.argmax(np.diff(ma))))
json.dump({'losses': losses.tolist(), 'lambdas': log.lambdas},
          open('/root/pkg/.devtmp/losscurve.json', 'w'))
for i in range(0, 450, 30):
    print(f'it {i:3d}: loss={losses[i]:.4f} lam={log.lambdas[i]:.3f}')
