import numpy as np
from tvseg.synth import generate_cells
from tvseg.net import NetSpec, build, train
from tvseg.activations import RegActConfig

samples = generate_cells(20, 64, seed=21)
for lr, epochs in [(0.005, 300), (0.0075, 300)]:
    spec = NetSpec(activation='regularized',
                   reg=RegActConfig(lam=0.5, kappa=0.25, tau=0.125,
                                    iterations=100, mode='one_step'))
    net = build(spec, seed=0); net.params.lr = lr
    log = train(net, samples, epochs=epochs, batch_size=len(samples), seed=0,
                tau_lambda=1.5)
    losses = np.array(log.losses)
    ma = np.convolve(losses, np.ones(20) / 20, mode='valid')
    d = np.diff(ma)
    ups = np.where(d > 1e-12)[0]
    print(f'lr={lr}: worst_up={d.max():.3e} ups at {ups[:25]} '
          f'loss {losses[0]:.3f}->{losses[-1]:.4f} lam={net.lam:.3f}', flush=True)
    raw_ups = np.where(np.diff(losses) > 1e-12)[0]
    print(f'   raw loss ups at {raw_ups[:30]}', flush=True)
