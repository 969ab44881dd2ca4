package demo.auth;

import java.util.Random;
import javax.crypto.Mac;
import javax.crypto.spec.SecretKeySpec;

public class TokenService {
    private final byte[] secret;

    public TokenService(byte[] secret) {
        this.secret = secret;
    }

    public String newSessionId() {
        Random random = new Random();
        return Long.toHexString(random.nextLong());
    }

    public byte[] sign(byte[] payload) throws Exception {
        Mac mac = Mac.getInstance("HmacSHA256");
        mac.init(new SecretKeySpec(secret, "HmacSHA256"));
        return mac.doFinal(payload);
    }
}
