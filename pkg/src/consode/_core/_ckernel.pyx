# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled stepping kernel.

Mirrors ``_pykernel`` operation for operation. Build with
``-ffp-contract=off`` so no multiply-add is fused and results stay
bit-identical to the Python fallback.
"""
import numpy as np

from libc.math cimport fabs
from libc.stdlib cimport free, malloc
from libc.string cimport memcpy

from ..multiplier import MinorSingular
from ..solver import NotConverged, SingularJacobian, SolveResult


cdef double SINGULAR_RTOL = 1e-12
cdef double PIVOT_FLOOR = 1e-300
cdef int MAX_HALVINGS = 30

cdef enum:
    ST_OK = 0
    ST_NOT_CONVERGED = 1
    ST_MINOR_SINGULAR = 2
    ST_SINGULAR_JACOBIAN = 3
    ST_DIVERGED = 4


cdef struct Block:
    const double* coef
    const int* exps
    const long long* off


cdef struct Sys:
    int n
    int m
    int half
    int mode
    const int* perm
    const int* fh_var
    Block f
    Block psi
    Block fh


cdef struct Work:
    # conservative residual scratch
    double* lam     # m*n
    double* minor   # m*m
    double* rhs     # m
    double* w       # m
    double* fh      # n-m
    double* vel     # n
    double* mid     # n
    int* piv        # max(m, n)
    # newton scratch
    double* x
    double* r
    double* rj
    double* xt
    double* rt
    double* d
    double* jac     # n*n
    double* f       # n
    double det      # determinant at the last singular-minor failure
    double* fail_x  # state at failure


cdef struct Step:
    Sys* s
    Work* w
    int kind
    double tau
    const double* xp


cdef inline double ipow(double v, int e) noexcept nogil:
    cdef double r
    cdef int i
    if e == 0:
        return 1.0
    r = v
    for i in range(e - 1):
        r = r * v
    return r


cdef double eval_poly(const Block* b, int idx, int n, const double* x) noexcept nogil:
    cdef double acc = 0.0, c
    cdef long long t
    cdef int r, e
    for t in range(b.off[idx], b.off[idx + 1]):
        c = b.coef[t]
        for r in range(n):
            e = b.exps[t * n + r]
            if e:
                c = c * ipow(x[r], e)
        acc = acc + c
    return acc


cdef double fdf(const Block* b, int idx, int n, int j, const double* xp, const double* xn) noexcept nogil:
    cdef double acc = 0.0, g, t
    cdef long long k
    cdef int r, e, a, l
    for k in range(b.off[idx], b.off[idx + 1]):
        e = b.exps[k * n + j]
        if e == 0:
            continue
        g = 0.0
        for l in range(e):
            g = g + ipow(xn[j], l) * ipow(xp[j], e - l - 1)
        t = b.coef[k] * g
        for r in range(n):
            a = b.exps[k * n + r]
            if r != j and a:
                if r < j:
                    t = t * ipow(xp[r], a)
                else:
                    t = t * ipow(xn[r], a)
        acc = acc + t
    return acc


cdef inline double maxabs(const double* v, int n) noexcept nogil:
    cdef double m = 0.0, a
    cdef int i
    for i in range(n):
        a = fabs(v[i])
        if a > m or a != a:
            m = a
    return m


cdef int lu_factor(double* a, int* perm, int n, double* sign) noexcept nogil:
    """Row-major in-place LU; returns 1 on a pivot below the floor."""
    cdef int i, j, k, p, ti
    cdef double best, v, piv, l, tmp
    sign[0] = 1.0
    for i in range(n):
        perm[i] = i
    for k in range(n):
        p = k
        best = fabs(a[k * n + k])
        for i in range(k + 1, n):
            v = fabs(a[i * n + k])
            if v > best:
                best = v
                p = i
        if not (best >= PIVOT_FLOOR):
            return 1
        if p != k:
            for j in range(n):
                tmp = a[k * n + j]
                a[k * n + j] = a[p * n + j]
                a[p * n + j] = tmp
            ti = perm[k]
            perm[k] = perm[p]
            perm[p] = ti
            sign[0] = -sign[0]
        piv = a[k * n + k]
        for i in range(k + 1, n):
            l = a[i * n + k] / piv
            a[i * n + k] = l
            for j in range(k + 1, n):
                a[i * n + j] = a[i * n + j] - l * a[k * n + j]
    return 0


cdef void lu_solve(const double* lu, const int* perm, int n, const double* b, double* y) noexcept nogil:
    cdef int i, j
    cdef double s
    for i in range(n):
        y[i] = b[perm[i]]
    for i in range(n):
        s = y[i]
        for j in range(i):
            s = s - lu[i * n + j] * y[j]
        y[i] = s
    for i in range(n - 1, -1, -1):
        s = y[i]
        for j in range(i + 1, n):
            s = s - lu[i * n + j] * y[j]
        y[i] = s / lu[i * n + i]


cdef void lambda_into(Sys* s, const double* xp, const double* xn, double* lam) noexcept nogil:
    cdef int i, j
    for i in range(s.m):
        for j in range(s.n):
            lam[i * s.n + j] = fdf(&s.psi, i, s.n, j, xp, xn)


cdef void fhat_into(Sys* s, Work* w, const double* xp, const double* xn, double* out) noexcept nogil:
    cdef int c, i
    cdef int k = s.n - s.m
    if s.mode == 0:
        for c in range(k):
            out[c] = fdf(&s.fh, c, s.n, s.fh_var[c], xp, xn)
    elif s.mode == 1:
        for c in range(k):
            out[c] = 0.5 * (eval_poly(&s.fh, c, s.n, xp) + eval_poly(&s.fh, c, s.n, xn))
    else:
        for i in range(s.n):
            w.mid[i] = 0.5 * (xp[i] + xn[i])
        for c in range(k):
            out[c] = eval_poly(&s.fh, c, s.n, w.mid)


cdef int velocity_into(Sys* s, Work* w, const double* xp, const double* xn, double* vel) noexcept nogil:
    cdef int n = s.n, m = s.m, i, j, b, c
    cdef double rowmax = 0.0, acc, det, sign
    lambda_into(s, xp, xn, w.lam)
    fhat_into(s, w, xp, xn, w.fh)
    for i in range(m):
        acc = 0.0
        for j in range(n):
            acc = acc + fabs(w.lam[i * n + j])
        if acc > rowmax:
            rowmax = acc
    for i in range(m):
        for b in range(m):
            w.minor[i * m + b] = w.lam[i * n + s.perm[b]]
        acc = 0.0
        for c in range(n - m):
            acc = acc + w.lam[i * n + s.perm[m + c]] * w.fh[c]
        w.rhs[i] = acc
    if lu_factor(w.minor, w.piv, m, &sign):
        det = 0.0
    else:
        det = sign
        for b in range(m):
            det = det * w.minor[b * m + b]
    if not (fabs(det) >= SINGULAR_RTOL * (1.0 + rowmax)):
        w.det = det
        return ST_MINOR_SINGULAR
    lu_solve(w.minor, w.piv, m, w.rhs, w.w)
    for b in range(m):
        vel[s.perm[b]] = -w.w[b]
    for c in range(n - m):
        vel[s.perm[m + c]] = w.fh[c]
    return ST_OK


cdef void rhs_into(Sys* s, const double* x, double* out) noexcept nogil:
    cdef int i
    for i in range(s.n):
        out[i] = eval_poly(&s.f, i, s.n, x)


cdef int residual(Step* st, const double* xn, double* r) noexcept nogil:
    cdef Sys* s = st.s
    cdef Work* w = st.w
    cdef int n = s.n, i, status
    cdef const double* xp = st.xp
    if st.kind == 0:
        status = velocity_into(s, w, xp, xn, w.vel)
        if status != ST_OK:
            memcpy(w.fail_x, xn, n * sizeof(double))
            return status
        for i in range(n):
            r[i] = (xn[i] - xp[i]) / st.tau - w.vel[i]
    elif st.kind == 2:
        rhs_into(s, xn, w.vel)
        for i in range(n):
            r[i] = (xn[i] - xp[i]) / st.tau - w.vel[i]
    else:
        for i in range(n):
            w.mid[i] = 0.5 * (xp[i] + xn[i])
        rhs_into(s, w.mid, w.vel)
        for i in range(n):
            r[i] = (xn[i] - xp[i]) / st.tau - w.vel[i]
    return ST_OK


cdef int newton(Step* st, double abs_tol, int max_iters, double fd_step, double damping,
                double stall_tol, double* out, int* iters, double* norm, int* flag) noexcept nogil:
    """Solve from the Euler predictor; the root (or best iterate) lands in ``out``."""
    cdef Sys* s = st.s
    cdef Work* w = st.w
    cdef int n = s.n, i, j, h, it = 0, stalled = 0, improved, status
    cdef double nr, nt, xj, hstep, lam, sign
    cdef double* x = w.x
    cdef double* r = w.r
    cdef double* xt = w.xt
    cdef double* rt = w.rt
    cdef double* tmp
    rhs_into(s, st.xp, w.f)
    for i in range(n):
        x[i] = st.xp[i] + st.tau * w.f[i]
    status = residual(st, x, r)
    if status != ST_OK:
        return status
    nr = maxabs(r, n)
    while not (nr <= abs_tol) and it < max_iters:
        for j in range(n):
            xj = x[j]
            hstep = fd_step * (1.0 + fabs(xj))
            x[j] = xj + hstep
            status = residual(st, x, w.rj)
            x[j] = xj
            if status != ST_OK:
                return status
            for i in range(n):
                w.jac[i * n + j] = (w.rj[i] - r[i]) / hstep
        if lu_factor(w.jac, w.piv, n, &sign):
            memcpy(w.fail_x, x, n * sizeof(double))
            return ST_SINGULAR_JACOBIAN
        lu_solve(w.jac, w.piv, n, r, w.d)
        lam = 1.0
        improved = 0
        for h in range(MAX_HALVINGS + 1):
            for i in range(n):
                xt[i] = x[i] - lam * w.d[i]
            status = residual(st, xt, rt)
            if status != ST_OK:
                return status
            nt = maxabs(rt, n)
            if nt < nr:
                improved = 1
                break
            lam = lam * damping
        it += 1
        if not improved:
            stalled = 1
            break
        tmp = x; x = xt; xt = tmp
        tmp = r; r = rt; rt = tmp
        nr = nt
    # keep the buffers consistent for the next call
    w.x = x; w.xt = xt; w.r = r; w.rt = rt
    memcpy(out, x, n * sizeof(double))
    iters[0] = it
    norm[0] = nr
    if nr <= abs_tol:
        flag[0] = 0
        return ST_OK
    if stalled and nr <= stall_tol:
        flag[0] = 1
        return ST_OK
    memcpy(w.fail_x, x, n * sizeof(double))
    return ST_NOT_CONVERGED


cdef void explicit_step(Sys* s, Work* w, int kind, const double* x, double tau, double* y) noexcept nogil:
    cdef int n = s.n, h = s.half, i
    cdef double ht = 0.5 * tau
    if kind == 1:
        rhs_into(s, x, w.f)
        for i in range(n):
            y[i] = x[i] + tau * w.f[i]
        return
    for i in range(n):
        y[i] = x[i]
    for i in range(h):
        w.f[i] = eval_poly(&s.f, h + i, n, y)
    for i in range(h):
        y[h + i] = x[h + i] + ht * w.f[i]
    for i in range(h):
        w.f[i] = eval_poly(&s.f, i, n, y)
    for i in range(h):
        y[i] = x[i] + tau * w.f[i]
    for i in range(h):
        w.f[i] = eval_poly(&s.f, h + i, n, y)
    for i in range(h):
        y[h + i] = y[h + i] + ht * w.f[i]


cdef int do_step(Step* st, double abs_tol, int max_iters, double fd_step, double damping,
                 double stall_tol, double* out, int* iters, double* norm, int* flag) noexcept nogil:
    if st.kind == 1 or st.kind == 3:
        explicit_step(st.s, st.w, st.kind, st.xp, st.tau, out)
        iters[0] = 0
        norm[0] = 0.0
        flag[0] = 0
        return ST_OK
    return newton(st, abs_tol, max_iters, fd_step, damping, stall_tol, out, iters, norm, flag)


cdef class _Bound:
    """Holds contiguous copies of the packed arrays plus scratch memory."""
    cdef Sys s
    cdef Work w
    cdef object keep
    cdef double* buf
    cdef int* ibuf

    def __cinit__(self, ps):
        cdef int n = ps.n, m = ps.m
        cdef double[::1] f_coef = np.ascontiguousarray(ps.f_coef, dtype=np.float64)
        cdef int[::1] f_exp = np.ascontiguousarray(ps.f_exp, dtype=np.int32).ravel()
        cdef long long[::1] f_off = np.ascontiguousarray(ps.f_off, dtype=np.int64)
        cdef double[::1] p_coef = np.ascontiguousarray(ps.psi_coef, dtype=np.float64)
        cdef int[::1] p_exp = np.ascontiguousarray(ps.psi_exp, dtype=np.int32).ravel()
        cdef long long[::1] p_off = np.ascontiguousarray(ps.psi_off, dtype=np.int64)
        cdef double[::1] h_coef = np.ascontiguousarray(ps.fh_coef, dtype=np.float64)
        cdef int[::1] h_exp = np.ascontiguousarray(ps.fh_exp, dtype=np.int32).ravel()
        cdef long long[::1] h_off = np.ascontiguousarray(ps.fh_off, dtype=np.int64)
        cdef int[::1] perm = np.ascontiguousarray(ps.perm, dtype=np.int32)
        cdef int[::1] fh_var = np.ascontiguousarray(ps.fh_var, dtype=np.int32)
        # dummies keep pointers valid for empty blocks
        cdef double[::1] dz = np.zeros(1)
        cdef int[::1] iz = np.zeros(1, dtype=np.int32)
        self.keep = (f_coef, f_exp, f_off, p_coef, p_exp, p_off, h_coef, h_exp, h_off, perm, fh_var, dz, iz)
        self.s.n = n
        self.s.m = m
        self.s.half = ps.half
        self.s.mode = ps.mode
        self.s.perm = &perm[0]
        self.s.fh_var = &fh_var[0] if fh_var.shape[0] else &iz[0]
        self.s.f.coef = &f_coef[0] if f_coef.shape[0] else &dz[0]
        self.s.f.exps = &f_exp[0] if f_exp.shape[0] else &iz[0]
        self.s.f.off = &f_off[0]
        self.s.psi.coef = &p_coef[0] if p_coef.shape[0] else &dz[0]
        self.s.psi.exps = &p_exp[0] if p_exp.shape[0] else &iz[0]
        self.s.psi.off = &p_off[0]
        self.s.fh.coef = &h_coef[0] if h_coef.shape[0] else &dz[0]
        self.s.fh.exps = &h_exp[0] if h_exp.shape[0] else &iz[0]
        self.s.fh.off = &h_off[0]
        cdef int total = m * n + m * m + m + m + n + n + n + 7 * n + n * n + n + n
        self.buf = <double*> malloc(total * sizeof(double))
        self.ibuf = <int*> malloc(n * sizeof(int))
        if self.buf == NULL or self.ibuf == NULL:
            raise MemoryError()
        cdef double* p = self.buf
        self.w.lam = p; p += m * n
        self.w.minor = p; p += m * m
        self.w.rhs = p; p += m
        self.w.w = p; p += m
        self.w.fh = p; p += n
        self.w.vel = p; p += n
        self.w.mid = p; p += n
        self.w.x = p; p += n
        self.w.r = p; p += n
        self.w.rj = p; p += n
        self.w.xt = p; p += n
        self.w.rt = p; p += n
        self.w.d = p; p += n
        self.w.f = p; p += n
        self.w.jac = p; p += n * n
        self.w.fail_x = p; p += n
        self.w.piv = self.ibuf
        self.w.det = 0.0

    def __dealloc__(self):
        free(self.buf)
        free(self.ibuf)


_BOUND = {}


cdef _Bound _bind(ps):
    key = id(ps)
    entry = _BOUND.get(key)
    if entry is not None and entry[0] is ps:
        return entry[1]
    b = _Bound(ps)
    if len(_BOUND) > 64:
        _BOUND.clear()
    _BOUND[key] = (ps, b)
    return b


def _vec(x, int n):
    a = np.ascontiguousarray(x, dtype=np.float64)
    if a.shape[0] != n:
        raise ValueError(f"state has length {a.shape[0]}, expected {n}")
    return a


def lambda_tau(ps, x_prev, x_next):
    cdef _Bound b = _bind(ps)
    cdef double[::1] xp = _vec(x_prev, b.s.n)
    cdef double[::1] xn = _vec(x_next, b.s.n)
    out = np.empty((b.s.m, b.s.n))
    cdef double[:, ::1] o = out
    lambda_into(&b.s, &xp[0], &xn[0], &o[0, 0])
    return out


def fhat(ps, x_prev, x_next):
    cdef _Bound b = _bind(ps)
    cdef double[::1] xp = _vec(x_prev, b.s.n)
    cdef double[::1] xn = _vec(x_next, b.s.n)
    out = np.empty(b.s.n - b.s.m)
    cdef double[::1] o = out
    fhat_into(&b.s, &b.w, &xp[0], &xn[0], &o[0])
    return out


def velocity(ps, x_prev, x_next):
    cdef _Bound b = _bind(ps)
    cdef double[::1] xp = _vec(x_prev, b.s.n)
    cdef double[::1] xn = _vec(x_next, b.s.n)
    out = np.empty(b.s.n)
    cdef double[::1] o = out
    if velocity_into(&b.s, &b.w, &xp[0], &xn[0], &o[0]) != ST_OK:
        raise MinorSingular(np.asarray(xp), np.asarray(xn), b.w.det)
    return out


def conservative_residual(ps, x_prev, x_next, double tau):
    cdef _Bound b = _bind(ps)
    cdef double[::1] xp = _vec(x_prev, b.s.n)
    cdef double[::1] xn = _vec(x_next, b.s.n)
    out = np.empty(b.s.n)
    cdef double[::1] o = out
    cdef Step st
    st.s = &b.s
    st.w = &b.w
    st.kind = 0
    st.tau = tau
    st.xp = &xp[0]
    if residual(&st, &xn[0], &o[0]) != ST_OK:
        raise MinorSingular(np.asarray(xp), np.asarray(xn), b.w.det)
    return out


cdef _fail(int status, _Bound b, double[::1] xp, int it, double nr):
    cdef int n = b.s.n
    fx = np.array([b.w.fail_x[i] for i in range(n)])
    if status == ST_MINOR_SINGULAR:
        return MinorSingular(np.asarray(xp).copy(), fx, b.w.det)
    if status == ST_SINGULAR_JACOBIAN:
        return SingularJacobian(fx)
    return NotConverged(SolveResult(fx, it, nr, False, False))


def step(ps, int kind, x, double tau, double abs_tol, int max_iters, double fd_step,
         double damping, double stall_tol):
    cdef _Bound b = _bind(ps)
    if kind == 3 and b.s.half < 0:
        raise ValueError("Stormer-Verlet needs a separable system")
    cdef double[::1] xp = _vec(x, b.s.n)
    out = np.empty(b.s.n)
    cdef double[::1] o = out
    cdef Step st
    cdef int it = 0, flag = 0, status
    cdef double nr = 0.0
    st.s = &b.s
    st.w = &b.w
    st.kind = kind
    st.tau = tau
    st.xp = &xp[0]
    status = do_step(&st, abs_tol, max_iters, fd_step, damping, stall_tol, &o[0], &it, &nr, &flag)
    if status != ST_OK:
        raise _fail(status, b, xp, it, nr)
    return out, it, nr, flag


def integrate(ps, int kind, x0, double tau, long n_steps, double abs_tol, int max_iters,
              double fd_step, double damping, double stall_tol, double r_div):
    cdef _Bound b = _bind(ps)
    cdef int n = b.s.n
    if kind == 3 and b.s.half < 0:
        raise ValueError("Stormer-Verlet needs a separable system")
    states_a = np.empty((n_steps + 1, n))
    iters_a = np.zeros(n_steps + 1, dtype=np.int32)
    resid_a = np.zeros(n_steps + 1)
    flags_a = np.zeros(n_steps + 1, dtype=np.int8)
    cdef double[:, ::1] states = states_a
    cdef int[::1] iters = iters_a
    cdef double[::1] resid = resid_a
    cdef signed char[::1] flags = flags_a
    cdef double[::1] x0v = _vec(x0, n)
    cdef long k = 0, fail_step = -1
    cdef int status = ST_OK, it = 0, flag = 0, i
    cdef double nr = 0.0
    cdef Step st
    st.s = &b.s
    st.w = &b.w
    st.kind = kind
    st.tau = tau
    for i in range(n):
        states[0, i] = x0v[i]
    with nogil:
        while k < n_steps:
            st.xp = &states[k, 0]
            status = do_step(&st, abs_tol, max_iters, fd_step, damping, stall_tol,
                             &states[k + 1, 0], &it, &nr, &flag)
            if status != ST_OK:
                fail_step = k + 1
                break
            k += 1
            iters[k] = it
            resid[k] = nr
            flags[k] = flag
            if not (maxabs(&states[k, 0], n) <= r_div):
                status = ST_DIVERGED
                fail_step = k
                break
    cdef long last = k + 1
    fail_x = None
    fail_resid = 0.0
    fail_det = 0.0
    if status in (ST_NOT_CONVERGED, ST_MINOR_SINGULAR, ST_SINGULAR_JACOBIAN):
        fail_x = np.array([b.w.fail_x[i] for i in range(n)])
        if status == ST_NOT_CONVERGED:
            fail_resid = nr
        elif status == ST_MINOR_SINGULAR:
            fail_det = b.w.det
    return (states_a[:last].copy(), iters_a[:last].copy(), resid_a[:last].copy(),
            flags_a[:last].copy(), status, fail_step, fail_x, fail_resid, fail_det)
