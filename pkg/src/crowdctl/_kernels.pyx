# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled kernels; semantics match crowdctl._kernels_py exactly."""
import numpy as np
cimport numpy as cnp

cnp.import_array()


cdef inline bint _better(double pa, Py_ssize_t a, double pb, Py_ssize_t b) noexcept nogil:
    # max phi, then lowest flat index
    return pa > pb or (pa == pb and a < b)


def greedy_rollout(init_counts, phi, light, p_one, nu, aux, uniforms, checkpoints):
    cdef Py_ssize_t B = phi.shape[0], K = phi.shape[1]
    cdef Py_ssize_t KK = K * K, N = B * KK
    cdef cnp.int64_t[::1] cnt = np.zeros(N, dtype=np.int64)
    cdef const double[::1] fphi = np.ascontiguousarray(phi, dtype=np.float64).ravel()
    cdef const cnp.uint8_t[::1] flight = np.ascontiguousarray(light, dtype=np.uint8).ravel()
    cdef const double[::1] fp = np.ascontiguousarray(p_one, dtype=np.float64).ravel()
    cdef const double[::1] fnu = np.ascontiguousarray(nu, dtype=np.float64).ravel()
    cdef const double[::1] faux = np.ascontiguousarray(aux, dtype=np.float64).ravel()
    cdef const double[::1] u = np.ascontiguousarray(uniforms, dtype=np.float64)
    cdef const cnp.int64_t[::1] cps = np.ascontiguousarray(checkpoints, dtype=np.int64)
    cdef const cnp.int64_t[::1] ic = np.ascontiguousarray(init_counts, dtype=np.int64)
    cdef Py_ssize_t C = cps.shape[0]
    out_nu_a = np.empty(C)
    out_aux_a = np.empty(C)
    cdef double[::1] out_nu = out_nu_a
    cdef double[::1] out_aux = out_aux_a

    # active list: usable states with positive count
    cdef cnp.int64_t[::1] active = np.empty(N, dtype=np.int64)
    cdef cnp.uint8_t[::1] in_active = np.zeros(N, dtype=np.uint8)
    cdef Py_ssize_t n_active = 0

    cdef Py_ssize_t b, s, t, i, best_i, ci = 0, step = 0, k1, k0
    cdef double nu_sum = 0.0, aux_sum = 0.0, bp

    for b in range(B):
        s = b * KK
        cnt[s] = ic[b]
        nu_sum += cnt[s] * fnu[s]
        aux_sum += cnt[s] * faux[s]
        if cnt[s] > 0 and flight[s] and K > 1:
            active[n_active] = s
            in_active[s] = 1
            n_active += 1

    with nogil:
        while ci < C and cps[ci] <= step:
            out_nu[ci] = nu_sum
            out_aux[ci] = aux_sum
            ci += 1
        while ci < C:
            # drop empty states, find best
            best_i = -1
            i = 0
            while i < n_active:
                s = active[i]
                if cnt[s] == 0:
                    in_active[s] = 0
                    n_active -= 1
                    active[i] = active[n_active]
                    continue
                if best_i < 0 or _better(fphi[s], s, bp, active[best_i]):
                    best_i = i
                    bp = fphi[s]
                i += 1
            if best_i < 0:
                break
            s = active[best_i]
            if u[step] < fp[s]:
                t = s + K
            else:
                t = s + 1
            cnt[s] -= 1
            cnt[t] += 1
            nu_sum += fnu[t] - fnu[s]
            aux_sum += faux[t] - faux[s]
            if not in_active[t] and flight[t]:
                k1 = (t % KK) // K
                k0 = (t % KK) % K
                if k1 + 1 < K and k0 + 1 < K:
                    active[n_active] = t
                    in_active[t] = 1
                    n_active += 1
            step += 1
            while ci < C and cps[ci] <= step:
                out_nu[ci] = nu_sum
                out_aux[ci] = aux_sum
                ci += 1
        while ci < C:
            out_nu[ci] = nu_sum
            out_aux[ci] = aux_sum
            ci += 1
    return out_nu_a, out_aux_a
