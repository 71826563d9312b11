typedef struct {
    int8_t *mat;
    int8_t *vec;
    int32_t *bias;
    int8_t *y;
    int32_t *acc;
} td_gemv_closure_env_t;

static void td_gemv_closure(void *arg)
{
    const td_gemv_closure_env_t *env = (const td_gemv_closure_env_t *)arg;
    int8_t *const mat = env->mat;
    int8_t *const vec = env->vec;
    int32_t *const bias = env->bias;
    int8_t *const y = env->y;
    int32_t *const acc = env->acc;
    td_gemv(mat, vec, bias, y, acc, 64u, 16u);
}

{
    td_gemv_closure_env_t env = { mat, vec, bias, y, acc };
    offload(TD_ENGINE_CLUSTER, td_gemv_closure, &env);
    offload_wait(TD_ENGINE_CLUSTER);
}
