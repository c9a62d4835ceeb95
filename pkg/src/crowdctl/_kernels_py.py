"""Pure-Python kernels. Reference semantics for the compiled versions."""
import heapq

import numpy as np


def greedy_rollout(init_counts, phi, light, p_one, nu, aux, uniforms, checkpoints):
    """Greedy ballot routing over a batch grouped by lattice state.

    A state is ``(b, k1, k0)``: initial-quality bin ``b`` plus the 1- and
    0-ballots received since. Each step routes one ballot to the light
    state with the largest ``phi`` (ties: lowest flat index), draws the
    outcome as 1 iff ``uniforms[step] < p_one[state]`` and moves one task.

    Returns ``(nu_sum, aux_sum)`` after each checkpoint step count. Once no
    light state remains the sums stay frozen.
    """
    B, K, _ = phi.shape
    KK = K * K
    counts = np.zeros(B * KK, dtype=np.int64)
    for b in range(B):
        counts[b * KK] = init_counts[b]
    flat_phi = phi.ravel()
    flat_light = light.ravel().astype(bool)
    flat_p = p_one.ravel()
    flat_nu = nu.ravel()
    flat_aux = aux.ravel()

    def usable(s):
        k1, k0 = divmod(s % KK, K)
        return flat_light[s] and k1 + 1 < K and k0 + 1 < K

    # accumulate in bin order so sums match the compiled kernel bit for bit
    nu_sum = 0.0
    aux_sum = 0.0
    for b in range(B):
        nu_sum += float(counts[b * KK]) * float(flat_nu[b * KK])
        aux_sum += float(counts[b * KK]) * float(flat_aux[b * KK])
    heap = []
    queued = set()
    for b in range(B):
        s = b * KK
        if counts[s] > 0 and usable(s):
            heap.append((-flat_phi[s], s))
            queued.add(s)
    heapq.heapify(heap)

    cps = np.asarray(checkpoints, dtype=np.int64)
    out_nu = np.empty(len(cps))
    out_aux = np.empty(len(cps))
    ci = 0
    step = 0
    while ci < len(cps) and cps[ci] <= step:
        out_nu[ci], out_aux[ci] = nu_sum, aux_sum
        ci += 1
    while ci < len(cps):
        while heap and counts[heap[0][1]] == 0:
            queued.discard(heapq.heappop(heap)[1])
        if not heap:
            break
        s = heap[0][1]
        k1, k0 = divmod(s % KK, K)
        t = s + K if uniforms[step] < flat_p[s] else s + 1
        counts[s] -= 1
        counts[t] += 1
        nu_sum += flat_nu[t] - flat_nu[s]
        aux_sum += flat_aux[t] - flat_aux[s]
        if t not in queued and usable(t):
            heapq.heappush(heap, (-flat_phi[t], t))
            queued.add(t)
        step += 1
        while ci < len(cps) and cps[ci] <= step:
            out_nu[ci], out_aux[ci] = nu_sum, aux_sum
            ci += 1
    out_nu[ci:] = nu_sum
    out_aux[ci:] = aux_sum
    return out_nu, out_aux
