"""Op table shared by the tensor tests and the acceptance suite: name -> (scalar function, input shapes)."""

import numpy as np

from satd import tensor as T

OPS = {
    "add": (lambda a, b: T.tsum(T.add(a, b) * T.add(a, b)), [(3, 4), (3, 4)]),
    "add_row": (lambda a, b: T.tsum(T.tanh(a + b)), [(3, 4), (4,)]),
    "sub": (lambda a, b: T.tsum((a - b) * (a - b)), [(2, 3), (2, 3)]),
    "mul": (lambda a, b: T.tsum(a * b * a), [(3, 2), (3, 2)]),
    "div": (lambda a: T.tsum(a / 3.0), [(2, 2)]),
    "neg": (lambda a: T.tsum(T.neg(a) * a), [(4,)]),
    "matmul": (lambda a, b: T.tsum(T.tanh(a @ b)), [(3, 5), (5, 2)]),
    "transpose": (lambda a: T.tsum(T.transpose(a) @ a), [(3, 4)]),
    "reshape": (lambda a: T.tsum(T.tanh(T.reshape(a, (2, 6)))), [(3, 4)]),
    "tanh": (lambda a: T.tsum(T.tanh(a)), [(3, 3)]),
    "exp": (lambda a: T.tsum(T.exp(a)), [(3, 3)]),
    "log": (lambda a: T.tsum(T.log(T.exp(a) + 1.0)), [(3, 3)]),
    "softplus": (lambda a: T.tsum(T.softplus(a) * a), [(5,)]),
    "sum_axis": (lambda a: T.tsum(T.tanh(T.tsum(a, axis=0))), [(4, 3)]),
    "mean": (lambda a: T.tsum(T.mean(a, axis=1) * T.mean(a, axis=1)), [(4, 3)]),
    "softmax": (lambda a: T.tsum(T.softmax_temp(a, 0.5) * np.arange(4.0)), [(3, 4)]),
    "log_softmax": (lambda a: T.tsum(T.log_softmax_temp(a, 0.3) * np.arange(5.0)), [(2, 5)]),
    "l2_normalize": (lambda a: T.tsum(T.l2_normalize(a) * np.arange(6.0)), [(3, 6)]),
    "cosine": (lambda a, b: T.tsum(T.cosine_sim_matrix(a, b) * np.arange(8.0).reshape(2, 4)), [(2, 5), (4, 5)]),
    "concat": (lambda a, b: T.tsum(T.tanh(T.concat([a, b], axis=1))), [(2, 3), (2, 2)]),
    "take_rows": (lambda a: T.tsum(T.take_rows(a, [0, 2, 2]) * np.arange(9.0).reshape(3, 3)), [(4, 3)]),
    "group_mean": (lambda a: T.tsum(T.tanh(T.group_mean(a, 2))), [(6, 3)]),
    "repeat_rows": (lambda a: T.tsum(T.repeat_rows(a, 3) * np.arange(18.0).reshape(6, 3)), [(2, 3)]),
}
