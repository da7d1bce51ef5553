__global__ void kernel(const float* L0, float* L1) {
	int OC0x = blockIdx.x;
	for(int OP0x = threadIdx.x; OP0x < 16384; OP0x += blockDim.x) {
		int OP1 = OP0x / 128, OP0 = OP0x % 128;
		float L1_s = 0;
		for(int K1 = -1; K1 < 2; K1++) {
			for(int K0 = -1; K0 < 2; K0++) {
				if(OP1 + K1 >= 0 && OP1 + K1 < 128 && OP0 + K0 >= 0 && OP0 + K0 < 128) {
					L1_s += L0[OC0x * 16384 + (OP1 + K1) * 128 + (OP0 + K0)];
				}
			}
		}
		L1[OC0x * 16384 + OP0x] = L1_s / 9;
	}
}
