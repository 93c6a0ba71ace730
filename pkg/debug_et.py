import sys, math
sys.path.insert(0, 'tests')
import numpy as np
import cvxopt
cvxopt.solvers.options['show_progress'] = False
from conftest import random_problem
from blockmiqp import bnb
from blockmiqp import qp as qpmod


def dense_relax_solve(relax):
    offs, total = [], 0
    for st in relax.stages:
        offs.append(total)
        total += st.n
    H = np.zeros((total, total))
    h = np.zeros(total)
    A_rows, b_vals, G_rows, g_vals = [], [], [], []
    for s, st in enumerate(relax.stages):
        o = offs[s]
        if st.n:
            H[o:o+st.n, o:o+st.n] = st.H
            h[o:o+st.n] = st.h
        for j in range(st.n):
            if np.isfinite(st.ub[j]):
                r = np.zeros(total); r[o+j] = 1.0
                G_rows.append(r); g_vals.append(st.ub[j])
            if np.isfinite(st.lb[j]):
                r = np.zeros(total); r[o+j] = -1.0
                G_rows.append(r); g_vals.append(-st.lb[j])
        for k in range(st.E.shape[0]):
            r = np.zeros(total); r[o:o+st.n] = st.E[k]
            if np.isfinite(st.cu[k]):
                G_rows.append(r.copy()); g_vals.append(st.cu[k])
            if np.isfinite(st.cl[k]):
                G_rows.append(-r); g_vals.append(-st.cl[k])
        for k in range(st.L.shape[0]):
            r = np.zeros(total); r[o:o+st.n] = st.L[k]
            A_rows.append(r); b_vals.append(st.b_loc[k])
        if st.ad is not None:
            no = offs[s+1]
            for k in range(st.ad.size):
                r = np.zeros(total)
                if st.n:
                    r[o:o+st.n] = st.Fd[k]
                r[no + st.dyn_out[k]] = -1.0
                A_rows.append(r); b_vals.append(-st.ad[k])
    kwargs = {}
    if A_rows:
        kwargs = dict(A=cvxopt.matrix(np.asarray(A_rows)), b=cvxopt.matrix(np.asarray(b_vals)))
    try:
        sol = cvxopt.solvers.qp(cvxopt.matrix(H + 1e-9*np.eye(total)), cvxopt.matrix(h),
                                cvxopt.matrix(np.asarray(G_rows)), cvxopt.matrix(np.asarray(g_vals)),
                                kktsolver='ldl', **kwargs)
    except Exception as exc:
        return f'error {exc}', None
    if sol['status'] == 'optimal':
        x = np.asarray(sol['x']).ravel()
        return 'optimal', relax.const + 0.5*float(x@H@x) + float(h@x)
    return sol['status'], None


rng = np.random.default_rng(6)
probs = []
for trial in range(40):
    b = int(rng.integers(0, 7))
    probs.append(random_problem(rng, n_int=b, feasible_seed=(trial % 3 != 2), nc_rng=(1, 3)))
prob = probs[6]

orig = qpmod.solve_relaxation
events = []
def spy(relax, warm=None, upper_bound=math.inf, options=None):
    out = orig(relax, warm, upper_bound, options)
    events.append((relax, upper_bound, out))
    return out
bnb.qp.solve_relaxation = spy
res = bnb.solve(prob, bnb.BnbOptions())
bnb.qp.solve_relaxation = orig
print('bnb result:', res.status.value, res.objective, '(oracle 2.8105142647580914)')
for idx, (relax, ub, out) in enumerate(events):
    true_status, true_obj = dense_relax_solve(relax)
    claim = out.status.value
    if out.status is qpmod.QpStatus.EARLY_TERMINATED:
        bad = true_status == 'optimal' and true_obj < out.dual_bound - 1e-6
        print(f'{idx:3d} ET: claimed bound {out.dual_bound:.6f} vs ub {ub:.6f}; true {true_status} {true_obj} {"<== UNSOUND" if bad else ""}')
    elif out.status is qpmod.QpStatus.INFEASIBLE:
        bad = true_status == 'optimal'
        print(f'{idx:3d} INF ({out.certificate}); true {true_status} {true_obj} {"<== UNSOUND" if bad else ""}')
    elif out.status is qpmod.QpStatus.OPTIMAL:
        if true_status == 'optimal' and abs(true_obj - out.objective) > 1e-5:
            print(f'{idx:3d} OPT mismatch: {out.objective} vs {true_obj}')
