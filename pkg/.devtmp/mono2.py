import numpy as np
from tvseg.synth import generate_cells
from tvseg.net import NetSpec, build, train
from tvseg.activations import RegActConfig

samples = generate_cells(12, 48, seed=21)
for lr, iters in [(0.001, 600), (0.002, 600), (0.004, 500)]:
    spec = NetSpec(activation='regularized',
                   reg=RegActConfig(lam=0.5, kappa=0.25, tau=0.125,
                                    iterations=100, mode='one_step'))
    net = build(spec, seed=0); net.params.lr = lr
    log = train(net, samples, epochs=iters, batch_size=len(samples), seed=0,
                tau_lambda=1.5)
    losses = np.array(log.losses)
    gap = losses[20:] - losses[:-20]
    lams = np.array(log.lambdas)
    print(f'lr={lr}: worst 20-gap={gap.max():.3e} n_viol={(gap>1e-12).sum()} '
          f'loss {losses[0]:.3f}->{losses[-1]:.4f} lam final={net.lam:.4f} '
          f'lam range [{lams.min():.3f},{lams.max():.3f}]', flush=True)
